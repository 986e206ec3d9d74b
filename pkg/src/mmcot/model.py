"""Small decoder-only transformer over the unified vocabulary.

Pre-norm blocks, learned absolute positions, a language-model head over the
whole vocabulary, and a linear projection head mapping hidden states into the
codebook feature space for the reconstruction loss. Double precision is the
default so tests and gradient checks are exact; training runs may use float32.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_MAGIC = "MMCKPT1"

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    layers: int = 4
    heads: int = 4
    hidden_dim: int = 128
    feedforward_dim: int = 512
    context_length: int = 512
    proj_dim: int = 16
    seed: int = 0
    dtype: str = "float64"
    # Which hidden states feed the visual projection: "predict" selects the
    # positions whose next-token targets are the visual tokens (BOI..last-1),
    # "at" selects the visual-token positions themselves.
    rec_alignment: str = "predict"

    def __post_init__(self):
        if self.hidden_dim % self.heads != 0:
            raise ModelError("hidden_dim must be divisible by heads")
        if self.proj_dim <= 0:
            raise ModelError("proj_dim must be positive")
        if self.dtype not in _DTYPES:
            raise ModelError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.rec_alignment not in ("predict", "at"):
            raise ModelError("rec_alignment must be 'predict' or 'at'")

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    def param_count(self) -> int:
        """Exact parameter count of the module this config builds.

        embeddings: V*D + L_max*D
        per layer:  2 LayerNorms (2*2D), qkv (D*3D + 3D), attn out (D*D + D),
                    mlp (D*F + F + F*D + D)
        final norm: 2D
        lm head:    D*V + V
        visual head: D*D' + D'
        """
        d, f, v = self.hidden_dim, self.feedforward_dim, self.vocab_size
        per_layer = 4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * f + f + f * d + d)
        return (
            v * d
            + self.context_length * d
            + self.layers * per_layer
            + 2 * d
            + (d * v + v)
            + (d * self.proj_dim + self.proj_dim)
        )


class _Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.heads = cfg.heads
        self.head_dim = d // cfg.heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.attn_out = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, cfg.feedforward_dim)
        self.fc2 = nn.Linear(cfg.feedforward_dim, d)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, l, _ = x.shape
        return x.view(b, l, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x, attn_bias):
        """attn_bias: additive mask broadcastable to B x H x Lq x Lk."""
        h = self.ln1(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        q, k, v = self._split(q), self._split(k), self._split(v)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(self.head_dim)
        att = att + attn_bias
        att = att.softmax(dim=-1)
        y = att @ v
        y = y.transpose(1, 2).reshape(x.shape[0], -1, x.shape[-1])
        x = x + self.attn_out(y)
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x


class TinyMultimodalLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.wte = nn.Embedding(cfg.vocab_size, cfg.hidden_dim)
        self.wpe = nn.Embedding(cfg.context_length, cfg.hidden_dim)
        self.blocks = nn.ModuleList(_Block(cfg) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(cfg.hidden_dim)
        self.lm_head = nn.Linear(cfg.hidden_dim, cfg.vocab_size)
        self.visual_proj = nn.Linear(cfg.hidden_dim, cfg.proj_dim)
        self.to(cfg.torch_dtype)
        self._init_weights(cfg.seed)

    def _init_weights(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if p.dim() >= 2 or "wte" in name or "wpe" in name:
                    p.normal_(0.0, 0.02, generator=gen)
                elif "ln" in name and name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()

    def _check_ids(self, ids: torch.Tensor):
        if ids.dim() != 2:
            raise ModelError("ids must be B x L")
        if ids.shape[1] > self.cfg.context_length:
            raise ModelError(
                f"sequence length {ids.shape[1]} exceeds context {self.cfg.context_length}"
            )
        if int(ids.max()) >= self.cfg.vocab_size or int(ids.min()) < 0:
            raise ModelError("token id outside vocabulary")

    def forward(self, ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Full causal forward. Returns (hidden B x L x D, logits B x L x V)."""
        self._check_ids(ids)
        b, l = ids.shape
        pos = torch.arange(l, device=ids.device)
        x = self.wte(ids) + self.wpe(pos)
        causal = torch.full((l, l), float("-inf"), dtype=x.dtype, device=x.device).triu(1)
        for blk in self.blocks:
            x = blk(x, causal)
        hidden = self.ln_f(x)
        logits = self.lm_head(hidden)
        return hidden, logits

    def project_visual(
        self, hidden: torch.Tensor, image_spans: list[tuple[int, int]], block_len: int
    ) -> list[torch.Tensor]:
        """Project each image span's hidden rows to codebook space.

        image_spans holds (row, boi_position) pairs; the selected rows are the
        positions that predict the span's visual tokens (or the positions at
        the tokens themselves under rec_alignment="at"). Empty spans list
        gives an empty result.
        """
        offset = 0 if self.cfg.rec_alignment == "predict" else 1
        out = []
        for row, boi in image_spans:
            lo = boi + offset
            hi = lo + block_len
            if hi > hidden.shape[1]:
                raise ModelError(f"image span [{lo}:{hi}] exceeds sequence length")
            out.append(self.visual_proj(hidden[row, lo:hi]))
        return out

    # -- incremental decoding ------------------------------------------------

    def make_cache(self, batch: int, capacity: int):
        if capacity > self.cfg.context_length:
            raise ModelError("cache capacity exceeds context length")
        dh = self.cfg.hidden_dim // self.cfg.heads
        dt = self.cfg.torch_dtype
        return KVCache(
            k=[torch.zeros(batch, capacity, self.cfg.heads, dh, dtype=dt) for _ in range(self.cfg.layers)],
            v=[torch.zeros(batch, capacity, self.cfg.heads, dh, dtype=dt) for _ in range(self.cfg.layers)],
            lengths=torch.zeros(batch, dtype=torch.long),
        )

    @torch.no_grad()
    def prefill(self, ids: torch.Tensor, lengths: torch.Tensor, cache: "KVCache") -> torch.Tensor:
        """Run right-padded rows through empty caches; rows may differ in
        length. Returns each row's logits at its own last real position."""
        self._check_ids(ids)
        b, l = ids.shape
        if int(cache.lengths.max()) != 0:
            raise ModelError("prefill requires an empty cache")
        pos = torch.arange(l)
        x = self.wte(ids) + self.wpe(pos)
        causal = torch.full((l, l), float("-inf"), dtype=x.dtype).triu(1)
        for i, blk in enumerate(self.blocks):
            x = self._block_cached(blk, x, causal, cache, i, new=l)
        cache.lengths += lengths
        hidden = self.ln_f(x)
        rows = torch.arange(b)
        return self.lm_head(hidden[rows, lengths - 1])

    @torch.no_grad()
    def decode_step(self, tokens: torch.Tensor, cache: "KVCache") -> torch.Tensor:
        """Append one token per row (positions may differ) and return next-token
        logits, B x V."""
        b = tokens.shape[0]
        if int(cache.lengths.max()) >= cache.capacity:
            raise ModelError("cache capacity exhausted")
        pos = cache.lengths
        x = self.wte(tokens).unsqueeze(1) + self.wpe(pos).unsqueeze(1)
        max_len = int(cache.lengths.max()) + 1
        # each row may attend to its own cached positions plus the new token
        key_pos = torch.arange(max_len).unsqueeze(0)
        visible = key_pos <= cache.lengths.unsqueeze(1)
        bias = torch.where(
            visible, 0.0, float("-inf")
        ).to(self.cfg.torch_dtype).unsqueeze(1).unsqueeze(2)
        for i, blk in enumerate(self.blocks):
            x = self._block_cached(blk, x, bias, cache, i, new=1)
        cache.lengths += 1
        hidden = self.ln_f(x)
        return self.lm_head(hidden[:, 0])

    def _block_cached(self, blk: _Block, x, attn_bias, cache: "KVCache", layer: int, new: int):
        h = blk.ln1(x)
        q, k, v = blk.qkv(h).chunk(3, dim=-1)
        b, l, _ = x.shape
        q = blk._split(q)
        k_new = k.view(b, l, blk.heads, blk.head_dim)
        v_new = v.view(b, l, blk.heads, blk.head_dim)
        rows = torch.arange(b).unsqueeze(1)
        offs = torch.arange(new).unsqueeze(0)
        cols = cache.lengths.unsqueeze(1) + offs
        cache.k[layer][rows, cols] = k_new
        cache.v[layer][rows, cols] = v_new
        upto = int((cache.lengths + new).max())
        k_all = cache.k[layer][:, :upto].transpose(1, 2)
        v_all = cache.v[layer][:, :upto].transpose(1, 2)
        att = (q @ k_all.transpose(-1, -2)) / math.sqrt(blk.head_dim)
        if new == upto:  # fresh cache: plain causal bias
            att = att + attn_bias
        else:
            att = att + attn_bias[..., :upto]
        att = att.softmax(dim=-1)
        y = (att @ v_all).transpose(1, 2).reshape(b, l, -1)
        x = x + blk.attn_out(y)
        x = x + blk.fc2(F.gelu(blk.fc1(blk.ln2(x))))
        return x


@dataclass
class KVCache:
    k: list[torch.Tensor]  # per layer: B x cap x H x dh
    v: list[torch.Tensor]
    lengths: torch.Tensor  # B

    @property
    def capacity(self) -> int:
        return self.k[0].shape[1]

    def truncate(self, row: int, new_len: int) -> None:
        if new_len > int(self.lengths[row]):
            raise ModelError("cannot truncate cache forward")
        self.lengths[row] = new_len


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, model: TinyMultimodalLM, extra: dict | None = None) -> None:
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "config": asdict(model.cfg),
        "params": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[TinyMultimodalLM, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("magic") != CHECKPOINT_MAGIC:
        raise ModelError(f"bad checkpoint magic {payload.get('magic')!r}")
    cfg = ModelConfig(**payload["config"])
    model = TinyMultimodalLM(cfg)
    state = payload["params"]
    own = model.state_dict()
    for name, tensor in own.items():
        if name not in state:
            raise ModelError(f"checkpoint missing parameter {name}")
        if state[name].shape != tensor.shape:
            raise ModelError(
                f"shape mismatch for {name}: {tuple(state[name].shape)} vs {tuple(tensor.shape)}"
            )
    model.load_state_dict(state)
    return model, payload["extra"]
