"""Template-conditioned mesh decoder with additive skips and vertex-offset output."""
import torch
from torch import nn
import torch.nn.functional as F

from .encoder import COORD_SCALE, ShapeError


class MeshDecoder(nn.Module):
    """Animate a template from a latent code.

    The template is encoded through three fully connected levels
    (``dec_widths``). At the bottleneck the code embedding is concatenated
    with the template feature and passed through two forward LSTMs, then three
    fully connected layers map back to vertex offsets. Each upward level adds
    the matching template feature, and the offsets are added to the template.
    """

    def __init__(self, hp):
        super().__init__()
        self.hp = hp
        V = hp.num_vertices
        w1, w2, w3 = hp.dec_widths
        self.enc1 = nn.Linear(V * 3, w1)
        self.enc2 = nn.Linear(w1, w2)
        self.enc3 = nn.Linear(w2, w3)
        if hp.latent == "categorical":
            self.code_embed = nn.Parameter(
                torch.randn(hp.num_heads, hp.num_classes, hp.code_embed) / hp.num_classes ** 0.5)
        else:
            self.code_proj = nn.Linear(hp.continuous_dim, hp.num_heads * hp.code_embed)
        self.lstm1 = nn.LSTM(w3 + hp.num_heads * hp.code_embed, hp.dec_lstm, batch_first=True)
        self.lstm2 = nn.LSTM(hp.dec_lstm, hp.dec_lstm, batch_first=True)
        self.up1 = nn.Linear(hp.dec_lstm, w2)
        self.up2 = nn.Linear(w2, w1)
        self.up3 = nn.Linear(w1, V * 3)

    def embed_code(self, code):
        if self.hp.latent == "categorical":
            if code.shape[-2:] != (self.hp.num_heads, self.hp.num_classes):
                raise ShapeError(f"code shape {tuple(code.shape)} does not match "
                                 f"H={self.hp.num_heads}, C={self.hp.num_classes}")
            emb = torch.einsum("bthc,hce->bthe", code, self.code_embed)
            return emb.flatten(2)
        if code.shape[-1] != self.hp.continuous_dim:
            raise ShapeError(f"continuous code width {code.shape[-1]} != {self.hp.continuous_dim}")
        return self.code_proj(code)

    def forward(self, template, code):
        """``template`` (B, V, 3) mm, ``code`` (B, T, H, C) soft one-hot -> (B, T, V, 3) mm."""
        B, V = template.shape[:2]
        if V != self.hp.num_vertices or template.shape[-1] != 3:
            raise ShapeError(f"template has shape {tuple(template.shape)}, model expects V={self.hp.num_vertices}")
        if code.shape[0] != B:
            raise ShapeError("template and code batch sizes differ")
        T = code.shape[1]
        e1 = F.leaky_relu(self.enc1(template.reshape(B, -1) * COORD_SCALE), 0.2)
        e2 = F.leaky_relu(self.enc2(e1), 0.2)
        e3 = F.leaky_relu(self.enc3(e2), 0.2)
        z = torch.cat([e3[:, None].expand(B, T, -1), self.embed_code(code)], dim=-1)
        h = self.lstm2(self.lstm1(z)[0])[0]
        h = F.leaky_relu(self.up1(h) + e2[:, None], 0.2)
        h = F.leaky_relu(self.up2(h) + e1[:, None], 0.2)
        offsets = self.up3(h).reshape(B, T, V, 3)
        return template[:, None] + offsets
