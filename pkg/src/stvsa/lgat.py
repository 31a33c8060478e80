"""LSTM-enhanced graph attention classifier and the topology-blind LSTM baseline.

Shapes: samples are ``[B, N, T, F]`` tensors (batch, nodes, steps, channels);
both models return ``[B, 2]`` logits ordered (unstable, stable).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core.types import GridTopology

ACTIVATIONS = {
    "elu": F.elu,
    "sigmoid": torch.sigmoid,
    "relu": F.relu,
    "tanh": torch.tanh,
    "identity": lambda x: x,
}


@dataclass(frozen=True)
class LgatConfig:
    heads: int = 4
    head_dim: int = 32
    lstm_hidden: int = 32
    gat_layers: int = 2
    lr: float = 5e-4
    batch_size: int = 64
    epochs: int = 240
    leaky_slope: float = 0.2
    hidden_activation: str = "elu"
    final_activation: str = "sigmoid"
    attention_dropout: float = 0.0

    def __post_init__(self):
        if self.heads < 1 or self.head_dim < 1 or self.lstm_hidden < 1:
            raise ValueError("heads and dims must be positive")
        if self.gat_layers < 1:
            raise ValueError("need at least one GAT layer")
        for act in (self.hidden_activation, self.final_activation):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _as_tensor(x, like: torch.Tensor) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype=like.dtype)
    x = np.asarray(x)
    if not x.flags.writeable:  # torch cannot wrap read-only buffers
        x = x.copy()
    return torch.as_tensor(x, dtype=like.dtype)


class ClassifierModel(nn.Module):
    """Maps ``[B, N, T, F]`` features to 2-way logits and exposes loss gradients."""

    kind = "base"

    def _ref(self) -> torch.Tensor:
        return next(self.parameters())

    def logits(self, x) -> torch.Tensor:
        return self(_as_tensor(x, self._ref()))

    def loss(self, x, y) -> torch.Tensor:
        y = torch.as_tensor(np.asarray(y), dtype=torch.long)
        return F.cross_entropy(self.logits(x), y)

    def input_gradient(self, x, y) -> np.ndarray:
        """Per-sample gradient of the cross-entropy w.r.t. the input features."""
        xt = _as_tensor(x, self._ref()).detach().clone().requires_grad_(True)
        y = torch.as_tensor(np.asarray(y), dtype=torch.long).reshape(-1)
        loss = F.cross_entropy(self(xt), y, reduction="sum")
        if not loss.requires_grad:
            return np.zeros(xt.shape, dtype=xt.detach().numpy().dtype)
        (grad,) = torch.autograd.grad(loss, xt, allow_unused=True)
        return np.zeros(xt.shape, dtype=xt.detach().numpy().dtype) if grad is None else grad.detach().numpy()

    @torch.no_grad()
    def predict_proba(self, x, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x)
        out = [torch.softmax(self.logits(x[i : i + batch_size]), dim=-1).numpy()
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, 2))

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        return np.argmax(self.predict_proba(x, batch_size), axis=1)

    def flat_parameters(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()])

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


def lstm_encode(node_series: torch.Tensor, lstm: nn.LSTM) -> torch.Tensor:
    """Final hidden state of ``lstm`` run over ``[T, F]`` (or batched ``[B, T, F]``)."""
    squeeze = node_series.dim() == 2
    seq = node_series[None] if squeeze else node_series
    _, (h, _) = lstm(seq)
    h = h[-1]
    return h[0] if squeeze else h


def neighborhood_mask(topo: GridTopology) -> torch.Tensor:
    return torch.as_tensor(topo.neighbor_mask())


def attention_scores(wh: torch.Tensor, a: torch.Tensor, mask: torch.Tensor,
                     slope: float = 0.2) -> torch.Tensor:
    """Softmax over each node's neighborhood of ``LeakyReLU(a^T [Wh_i || Wh_j])``.

    ``wh`` is ``[..., N, d]`` (already transformed) and ``a`` is ``[2d]``;
    the result is ``[..., N, N]`` with exact zeros outside neighborhoods.
    """
    d = wh.shape[-1]
    src = wh @ a[:d]
    dst = wh @ a[d:]
    e = F.leaky_relu(src[..., :, None] + dst[..., None, :], negative_slope=slope)
    e = e.masked_fill(~mask, float("-inf"))
    return torch.softmax(e, dim=-1)


def attention_coefficients(h, W, a, topo: GridTopology, slope: float = 0.2) -> torch.Tensor:
    h = torch.as_tensor(h)
    W = torch.as_tensor(W, dtype=h.dtype)
    a = torch.as_tensor(a, dtype=h.dtype)
    return attention_scores(h @ W.T, a, neighborhood_mask(topo), slope)


def gat_aggregate(h: torch.Tensor, W: torch.Tensor, a: torch.Tensor, mask: torch.Tensor,
                  mode: str, activation=torch.sigmoid, slope: float = 0.2,
                  dropout: float = 0.0, training: bool = False) -> torch.Tensor:
    """Multi-head attention aggregation.

    ``W`` is ``[K, d_out, d_in]`` and ``a`` is ``[K, 2 d_out]``. ``concat`` applies the
    activation per head and joins the heads (``K * d_out``); ``average`` averages the
    head aggregates first and applies the activation once (``d_out``).
    """
    wh = torch.einsum("kod,...nd->...kno", W, h)  # [..., K, N, d_out]
    d_out = W.shape[1]
    src = torch.einsum("...kno,ko->...kn", wh, a[:, :d_out])
    dst = torch.einsum("...kno,ko->...kn", wh, a[:, d_out:])
    e = F.leaky_relu(src[..., :, None] + dst[..., None, :], negative_slope=slope)
    alpha = torch.softmax(e.masked_fill(~mask, float("-inf")), dim=-1)  # [..., K, N, N]
    if dropout > 0 and training:
        alpha = F.dropout(alpha, dropout, training=True)
    agg = alpha @ wh  # [..., K, N, d_out]
    if mode == "concat":
        out = activation(agg)
        return out.movedim(-3, -2).reshape(*agg.shape[:-3], agg.shape[-2], -1)
    if mode == "average":
        return activation(agg.mean(dim=-3))
    raise ValueError(f"unknown mode {mode!r}")


class GATLayer(nn.Module):
    def __init__(self, d_in: int, d_out: int, heads: int, mode: str, activation: str = "elu",
                 slope: float = 0.2, dropout: float = 0.0):
        super().__init__()
        if mode not in ("concat", "average"):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode, self.slope, self.dropout = mode, slope, dropout
        self.activation = activation
        self.W = nn.Parameter(torch.empty(heads, d_out, d_in))
        self.a = nn.Parameter(torch.empty(heads, 2 * d_out))
        for k in range(heads):
            nn.init.xavier_uniform_(self.W.data[k])
        nn.init.xavier_uniform_(self.a.data)

    @property
    def out_dim(self) -> int:
        k, d_out, _ = self.W.shape
        return k * d_out if self.mode == "concat" else d_out

    def forward(self, h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return gat_aggregate(h, self.W, self.a, mask, self.mode, ACTIVATIONS[self.activation],
                             self.slope, self.dropout, self.training)


def gat_layer(h, layer: GATLayer, topo: GridTopology) -> torch.Tensor:
    return layer(h, neighborhood_mask(topo))


class LGAT(ClassifierModel):
    """Per-node LSTM -> linear lift -> GAT (concat) ... -> GAT (average) -> node mean -> 2 logits."""

    kind = "lgat"

    def __init__(self, topo: GridTopology, n_channels: int = 4, cfg: LgatConfig = LgatConfig()):
        super().__init__()
        self.topo, self.cfg = topo, cfg
        self.register_buffer("mask", neighborhood_mask(topo), persistent=False)
        width = cfg.heads * cfg.head_dim
        self.lstm = nn.LSTM(n_channels, cfg.lstm_hidden, batch_first=True)
        self.lift = nn.Linear(cfg.lstm_hidden, width)
        layers = []
        for i in range(cfg.gat_layers):
            last = i == cfg.gat_layers - 1
            layers.append(GATLayer(
                width, cfg.head_dim, cfg.heads,
                mode="average" if last else "concat",
                activation=cfg.final_activation if last else cfg.hidden_activation,
                slope=cfg.leaky_slope, dropout=cfg.attention_dropout,
            ))
        self.gat = nn.ModuleList(layers)
        self.readout = nn.Linear(cfg.head_dim, 2)

    def node_states(self, x: torch.Tensor) -> torch.Tensor:
        B, N, T, Fc = x.shape
        if N != self.topo.node_count:
            raise ValueError(f"sample has {N} nodes, topology has {self.topo.node_count}")
        h = lstm_encode(x.reshape(B * N, T, Fc), self.lstm).reshape(B, N, -1)
        h = self.lift(h)
        for layer in self.gat:
            h = layer(h, self.mask)
        return h

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.node_states(x).mean(dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.readout(self.embed(x))


class LSTMBaseline(ClassifierModel):
    """Node-mean trajectory -> LSTM -> linear head. Blind to topology and node order."""

    kind = "lstm"

    def __init__(self, n_channels: int = 4, hidden: int = 32):
        super().__init__()
        self.lstm = nn.LSTM(n_channels, hidden, batch_first=True)
        self.readout = nn.Linear(hidden, 2)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return lstm_encode(x.mean(dim=1), self.lstm)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.readout(self.embed(x))


def lstm_baseline_forward(x, model: LSTMBaseline) -> torch.Tensor:
    return model.logits(x)


def lgat_forward(x, model: LGAT) -> torch.Tensor:
    return model.logits(x)


def zero_readout(model: ClassifierModel) -> None:
    with torch.no_grad():
        model.readout.weight.zero_()
        model.readout.bias.zero_()


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, loss_trace: list[float]):
        super().__init__(message)
        self.loss_trace = loss_trace


def fit_classifier(model: ClassifierModel, x: np.ndarray, y: np.ndarray, *, lr: float,
                   batch_size: int, epochs: int, stream, refresh=None) -> list[float]:
    """Mini-batch Adam on the cross-entropy; returns the mean loss per epoch.

    Batch order comes from ``stream`` (one child per epoch). ``refresh(epoch, model)``
    may return replacement features (same labels) before each epoch, which is
    how attacked samples are regenerated against the current parameters.
    """
    y_t = torch.as_tensor(np.asarray(y, dtype=np.int64))
    if len(y_t) == 0:
        raise ValueError("empty training set")
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    ref = model._ref()
    trace: list[float] = []
    for epoch in range(epochs):
        if refresh is not None:
            x = refresh(epoch, model)
        x_t = torch.as_tensor(np.array(x), dtype=ref.dtype)
        order = torch.as_tensor(stream.child("epoch", epoch).generator().permutation(len(y_t)))
        model.train()
        total = 0.0
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            opt.zero_grad()
            loss = F.cross_entropy(model(x_t[idx]), y_t[idx])
            if not torch.isfinite(loss):
                model.eval()
                raise TrainingDivergedError(f"non-finite loss in epoch {epoch}", trace)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        trace.append(total / len(order))
    model.eval()
    return trace
