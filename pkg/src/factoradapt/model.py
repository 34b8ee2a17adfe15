"""Toy-scale Conformer encoder/decoder with hybrid CTC/attention training.

Token layout: id 0 is the CTC blank, ids 1..C are characters, and the last
id is shared by <sos> and <eos>.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Parameter, Tensor

BLANK = 0
CANONICAL_PREFIX = "canonical."
SUB_KERNEL = 3
SUB_STRIDE = 2


@dataclass
class ModelConfig:
    input_dim: int = 40
    encoder_blocks: int = 2
    decoder_blocks: int = 1
    d_model: int = 64
    heads: int = 4
    ff_dim: int = 256
    conv_kernel: int = 7
    sub_channels: int = 16
    alphabet: str = "abcdefghijklmnopqrstuvwxyz '"
    lambda_train: float = 0.2
    lambda_decode: float = 0.3
    dropout: float = 0.1
    label_smoothing: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        for lam in (self.lambda_train, self.lambda_decode):
            if not 0.0 <= lam <= 1.0:
                raise ValueError(f"lambda {lam} outside [0, 1]")
        if len(set(self.alphabet)) != len(self.alphabet) or not self.alphabet:
            raise ValueError("alphabet must be non-empty with unique characters")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")

    @property
    def vocab_size(self) -> int:
        return len(self.alphabet) + 2

    @property
    def eos(self) -> int:
        return len(self.alphabet) + 1

    sos = eos

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        import ast

        kw = {}
        names = {f.name for f in fields(cls)}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            key = key.strip().removeprefix("model.")
            if key not in names:
                raise ValueError(f"unknown model config key {key!r}")
            kw[key] = ast.literal_eval(val.strip())
        return cls(**kw)


# ------------------------------------------------------------------ tokens


def encode_text(text: str, cfg: ModelConfig) -> list[int]:
    ids = []
    for ch in text:
        k = cfg.alphabet.find(ch)
        if k < 0:
            raise ValueError(f"character {ch!r} not in vocabulary")
        ids.append(k + 1)
    return ids


def decode_ids(ids, cfg: ModelConfig) -> str:
    return "".join(cfg.alphabet[i - 1] for i in ids if 0 < i <= len(cfg.alphabet))


def subsampled_length(T: int) -> int:
    t1 = (T - SUB_KERNEL) // SUB_STRIDE + 1
    return (t1 - SUB_KERNEL) // SUB_STRIDE + 1


MIN_FRAMES = SUB_KERNEL + SUB_STRIDE * (SUB_KERNEL - 1)  # 7: smallest T with T' >= 1


def ctc_min_frames(labels) -> int:
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


# ------------------------------------------------------------------ layers


def _sinusoid(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(0, d, 2)[None, :]
    ang = pos / 10000 ** (i / d)
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang)
    return pe


class ConformerASR:
    """Parameters live in ``self.params`` (name -> Parameter)."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Parameter] | None = None):
        self.cfg = cfg
        self.training = False
        self.rng = np.random.default_rng([cfg.seed, 1])
        if params is None:
            params = self._init_params(np.random.default_rng([cfg.seed, 0]))
        self.params = params

    # -------------------------------------------------------------- parameters

    def _init_params(self, rng) -> dict[str, Parameter]:
        cfg = self.cfg
        D, Fd, V, C = cfg.d_model, cfg.ff_dim, cfg.vocab_size, cfg.sub_channels
        shapes: dict[str, tuple] = {}

        def lin(name, i, o):
            shapes[name + ".w"] = (i, o)
            shapes[name + ".b"] = (o,)

        def ln(name):
            shapes[name + ".g"] = (D,)
            shapes[name + ".b"] = (D,)

        f_sub = subsampled_length(cfg.input_dim)
        if f_sub < 1:
            raise ValueError(f"input_dim {cfg.input_dim} below subsampling minimum {MIN_FRAMES}")
        shapes["sub.conv1.w"] = (C, 1, SUB_KERNEL, SUB_KERNEL)
        shapes["sub.conv1.b"] = (C,)
        shapes["sub.conv2.w"] = (C, C, SUB_KERNEL, SUB_KERNEL)
        shapes["sub.conv2.b"] = (C,)
        lin("sub.out", C * f_sub, D)
        for i in range(cfg.encoder_blocks):
            p = f"enc{i}."
            for ff in ("ff1", "ff2"):
                ln(p + ff + ".ln")
                lin(p + ff + ".l1", D, Fd)
                lin(p + ff + ".l2", Fd, D)
            ln(p + "att.ln")
            for m in "qkvo":
                lin(p + "att." + m, D, D)
            ln(p + "conv.ln")
            lin(p + "conv.pw1", D, 2 * D)
            shapes[p + "conv.dw"] = (cfg.conv_kernel, D)
            ln(p + "conv.ln2")
            lin(p + "conv.pw2", D, D)
            ln(p + "out.ln")
        lin("ctc", D, V)
        shapes["dec.embed"] = (V, D)
        for i in range(cfg.decoder_blocks):
            p = f"dec{i}."
            for a in ("self", "src"):
                ln(p + a + ".ln")
                for m in "qkvo":
                    lin(p + a + "." + m, D, D)
            ln(p + "ff.ln")
            lin(p + "ff.l1", D, Fd)
            lin(p + "ff.l2", Fd, D)
        ln("dec.out.ln")
        lin("dec.out", D, V)

        params = {}
        for name, shape in shapes.items():
            if name.endswith(".g"):
                data = np.ones(shape)
            elif name.endswith(".b"):
                data = np.zeros(shape)
            elif name.endswith("conv.dw"):
                data = rng.normal(0, 1.0 / np.sqrt(cfg.conv_kernel), shape)
            elif len(shape) == 4:
                fan_in = int(np.prod(shape[1:]))
                data = rng.normal(0, np.sqrt(2.0 / fan_in), shape)
            elif name == "dec.embed":
                data = rng.normal(0, 1.0, shape)
            else:
                lim = np.sqrt(6.0 / (shape[0] + shape[1]))
                data = rng.uniform(-lim, lim, shape)
            full = CANONICAL_PREFIX + name
            params[full] = Parameter(full, data)
        return params

    def p(self, name: str) -> Parameter:
        return self.params[CANONICAL_PREFIX + name]

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def freeze(self):
        for p in self.params.values():
            p.trainable = False

    def unfreeze(self):
        for p in self.params.values():
            p.trainable = True

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def save(self, ckpt_path, config_path=None):
        ad.save_parameters(ckpt_path, [self.params[k] for k in sorted(self.params)])
        if config_path is not None:
            with open(config_path, "w") as fh:
                fh.write(self.cfg.to_text())

    @classmethod
    def load(cls, ckpt_path, config_path) -> "ConformerASR":
        with open(config_path) as fh:
            cfg = ModelConfig.from_text(fh.read())
        return cls(cfg, ad.load_parameters(ckpt_path))

    # -------------------------------------------------------------- building blocks

    def _lin(self, x, name):
        return ad.linear(x, self.p(name + ".w"), self.p(name + ".b"))

    def _ln(self, x, name):
        return ad.layer_norm(x, self.p(name + ".g"), self.p(name + ".b"))

    def _drop(self, x):
        return ad.dropout(x, self.cfg.dropout, self.rng, self.training)

    def _mha(self, xq, xkv, name, mask=None):
        B, Tq, D = xq.shape
        Tk = xkv.shape[1]
        H = self.cfg.heads
        dh = D // H

        def split(t, T):
            return ad.transpose(ad.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

        q = split(self._lin(xq, name + ".q"), Tq)
        k = split(self._lin(xkv, name + ".k"), Tk)
        v = split(self._lin(xkv, name + ".v"), Tk)
        ctx = ad.scaled_dot_attention(q, k, v, mask)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, Tq, D))
        return self._lin(ctx, name + ".o")

    def _ff(self, x, name):
        h = ad.swish(self._lin(self._ln(x, name + ".ln"), name + ".l1"))
        return self._lin(self._drop(h), name + ".l2")

    def _conv_module(self, x, name):
        B, T, D = x.shape
        h = self._lin(self._ln(x, name + ".ln"), name + ".pw1")
        h = ad.mul(h[:, :, :D], ad.sigmoid(h[:, :, D:]))  # GLU
        k = self.cfg.conv_kernel
        pad = (k - 1) // 2
        z = Tensor(np.zeros((B, pad, D)))
        hp = ad.concat([z, h, z], axis=1)
        w = self.p(name + ".dw").t
        acc = None
        for j in range(k):
            term = ad.mul(hp[:, j : j + T, :], w[j])
            acc = term if acc is None else ad.add(acc, term)
        h = ad.swish(self._ln(acc, name + ".ln2"))
        return self._lin(h, name + ".pw2")

    # -------------------------------------------------------------- public ops

    def conv_subsample(self, features) -> Tensor:
        """(B, T, F) features -> (B, T', d_model) subsampling output.

        Two valid 3x3 convolutions with stride 2, so each halves the length
        as ``(n - 3) // 2 + 1``; T must be at least 7.
        """
        x = ad.as_tensor(features)
        if x.ndim == 2:
            x = ad.reshape(x, (1,) + x.shape)
        B, T, F = x.shape
        if T < MIN_FRAMES:
            raise ValueError(f"conv_subsample: need T >= {MIN_FRAMES} frames, got {T}")
        if F != self.cfg.input_dim:
            raise ValueError(f"conv_subsample: feature dim {F} != configured {self.cfg.input_dim}")
        h = ad.reshape(x, (B, 1, T, F))
        h = ad.relu(ad.conv2d(h, self.p("sub.conv1.w"), self.p("sub.conv1.b"), stride=SUB_STRIDE))
        h = ad.relu(ad.conv2d(h, self.p("sub.conv2.w"), self.p("sub.conv2.b"), stride=SUB_STRIDE))
        _, C, T2, F2 = h.shape
        h = ad.reshape(ad.transpose(h, (0, 2, 1, 3)), (B, T2, C * F2))
        return self._lin(h, "sub.out")

    def encode(self, hidden: Tensor, adapter: Callable[[Tensor], Tensor] | None = None) -> Tensor:
        """Encoder stack on the subsampling output, with optional adaptation transform."""
        h = ad.as_tensor(hidden)
        if adapter is not None:
            h = adapter(h)
            if h.shape != ad.as_tensor(hidden).shape:
                raise ValueError("adapter changed the hidden shape")
        B, T, D = h.shape
        x = self._drop(ad.add(h, _sinusoid(T, D)))
        for i in range(self.cfg.encoder_blocks):
            p = f"enc{i}."
            x = ad.add(x, ad.mul(self._ff(x, p + "ff1"), 0.5))
            x = ad.add(x, self._drop(self._mha(self._ln(x, p + "att.ln"), self._ln(x, p + "att.ln"), p + "att")))
            x = ad.add(x, self._drop(self._conv_module(x, p + "conv")))
            x = ad.add(x, ad.mul(self._ff(x, p + "ff2"), 0.5))
            x = self._ln(x, p + "out.ln")
        return x

    def ctc_log_probs(self, enc: Tensor) -> Tensor:
        return ad.log_softmax(self._lin(enc, "ctc"), axis=-1)

    def decoder_log_probs(self, enc: Tensor, prefixes: np.ndarray) -> Tensor:
        """Teacher-forced decoder: (B, L) input ids -> (B, L, V) log probs.

        ``enc`` is (B, T', D) or (1, T', D) broadcast over the prefixes.
        """
        prefixes = np.asarray(prefixes, dtype=np.int64)
        B, L = prefixes.shape
        D = self.cfg.d_model
        enc = ad.as_tensor(enc)
        if enc.shape[0] != B:
            enc = ad.reshape(ad.concat([enc] * B, axis=0), (B,) + enc.shape[1:])
        x = ad.add(ad.mul(ad.embedding(self.p("dec.embed"), prefixes), np.sqrt(D)), _sinusoid(L, D))
        x = self._drop(x)
        causal = np.triu(np.full((L, L), -1e9), k=1)
        for i in range(self.cfg.decoder_blocks):
            p = f"dec{i}."
            y = self._ln(x, p + "self.ln")
            x = ad.add(x, self._drop(self._mha(y, y, p + "self", causal)))
            x = ad.add(x, self._drop(self._mha(self._ln(x, p + "src.ln"), enc, p + "src")))
            x = ad.add(x, self._drop(self._ff(x, p + "ff")))
        x = self._ln(x, "dec.out.ln")
        return ad.log_softmax(self._lin(x, "dec.out"), axis=-1)

    # -------------------------------------------------------------- losses

    def ctc_loss(self, enc: Tensor, refs: list[list[int]]) -> Tensor:
        """Per-utterance CTC negative log likelihoods, shape (B,)."""
        lp = self.ctc_log_probs(enc)
        Tp = lp.shape[1]
        out = []
        for b, ref in enumerate(refs):
            _check_tokens(ref, self.cfg)
            need = ctc_min_frames(ref)
            if need > Tp:
                raise ValueError(f"ctc: label needs {need} frames but only {Tp} are available")
            out.append(ad.ctc_nll(lp[b], blank_augment(ref)))
        return ad.stack(out)

    def attention_loss(self, enc: Tensor, refs: list[list[int]], smoothing: float | None = None) -> Tensor:
        """Per-utterance label-smoothed cross entropy per target token, shape (B,)."""
        eps = self.cfg.label_smoothing if smoothing is None else smoothing
        for ref in refs:
            if not ref:
                raise ValueError("attention_loss: empty reference")
            _check_tokens(ref, self.cfg)
        L = max(len(r) for r in refs) + 1
        eos = self.cfg.eos
        inp = np.full((len(refs), L), eos, dtype=np.int64)
        tgt = np.full((len(refs), L), -1, dtype=np.int64)
        for b, r in enumerate(refs):
            inp[b, 1 : len(r) + 1] = r
            tgt[b, : len(r)] = r
            tgt[b, len(r)] = eos
        logp = self.decoder_log_probs(enc, inp)
        return smoothed_cross_entropy(logp, tgt, eps)

    def losses(self, hidden: Tensor, refs, adapter=None, lam=None):
        """(total, att, ctc) batch means of the multitask loss."""
        lam = self.cfg.lambda_train if lam is None else lam
        enc = self.encode(hidden, adapter)
        att = self.attention_loss(enc, refs)
        ctc = self.ctc_loss(enc, refs)
        per_utt = multitask_loss(att, ctc, lam)
        return ad.mean(per_utt), att, ctc

    # -------------------------------------------------------------- decoding

    def decode(self, enc: Tensor, beam: int = 1, lam: float | None = None, max_len: int | None = None) -> "Hypothesis":
        """Joint CTC/attention beam search for one utterance (enc: (1, T', D))."""
        lam = self.cfg.lambda_decode if lam is None else lam
        with ad.no_grad():
            enc = ad.as_tensor(enc)
            if enc.ndim == 2:
                enc = ad.reshape(enc, (1,) + enc.shape)
            ctc_lp = self.ctc_log_probs(enc).data[0]
            best = _beam_search(self, enc, ctc_lp, beam, lam, max_len)
            if beam > 1:
                greedy = _beam_search(self, enc, ctc_lp, 1, lam, max_len)
                if greedy.score > best.score:
                    best = greedy
        return best


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float
    att_score: float = 0.0
    ctc_score: float = 0.0

    def text(self, cfg: ModelConfig) -> str:
        return decode_ids(self.tokens, cfg)


def _check_tokens(ref, cfg):
    for t in ref:
        if not 1 <= t <= len(cfg.alphabet):
            raise ValueError(f"token id {t} outside vocabulary (1..{len(cfg.alphabet)})")


def blank_augment(ref) -> np.ndarray:
    ext = np.zeros(2 * len(ref) + 1, dtype=np.int64)
    ext[1::2] = ref
    return ext


def smoothed_cross_entropy(logp: Tensor, targets: np.ndarray, eps: float) -> Tensor:
    """Mean over valid steps of -sum(q * log p); targets < 0 are padding.

    q puts 1-eps on the target and eps/(V-1) on every other class.
    """
    logp = ad.as_tensor(logp)
    B, L, V = logp.shape
    q = np.zeros((B, L, V))
    valid = targets >= 0
    if eps > 0:
        q[:] = eps / (V - 1)
    bi, li = np.nonzero(valid)
    q[bi, li, targets[bi, li]] = 1.0 - eps
    q[~valid] = 0.0
    counts = valid.sum(axis=1).astype(np.float64)
    per_step = ad.tsum(ad.mul(logp, -q), axis=2)  # (B, L)
    return ad.div(ad.tsum(per_step, axis=1), counts)


def multitask_loss(att, ctc, lam: float):
    """(1 - lam) * att + lam * ctc."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda {lam} outside [0, 1]")
    if isinstance(att, (int, float)) and isinstance(ctc, (int, float)):
        return (1.0 - lam) * att + lam * ctc
    return ad.add(ad.mul(att, 1.0 - lam), ad.mul(ctc, lam))


def _joint(att, ctc, lam):
    return (1 - lam) * att + (lam * ctc if lam > 0 else 0.0)


def _beam_search(model: ConformerASR, enc, ctc_lp, beam, lam, max_len):
    cfg = model.cfg
    eos = cfg.eos
    Tp = ctc_lp.shape[0]
    max_len = Tp if max_len is None else min(max_len, Tp)
    chars = np.arange(1, len(cfg.alphabet) + 1, dtype=np.int64)
    blank_cum = np.cumsum(ctc_lp[:, BLANK])
    # running hyps: (tokens, att_score, ctc_prefix_score, r_nb, r_b)
    running = [([], 0.0, 0.0, np.full(Tp, -np.inf), blank_cum)]
    ended: list[Hypothesis] = []
    for step in range(max_len + 1):
        prefixes = np.array([[eos] + h[0] for h in running], dtype=np.int64)
        att_lp = model.decoder_log_probs(enc, prefixes).data[:, -1, :]
        cands = []
        for hi, (toks, att_s, _ctc_s, r_nb, r_b) in enumerate(running):
            # eos: full-sequence CTC probability of the prefix
            ctc_eos = float(np.logaddexp(r_nb[-1], r_b[-1]))
            a = att_s + att_lp[hi, eos]
            cands.append((_joint(a, ctc_eos, lam), hi, eos, a, ctc_eos, None, None))
            if step == max_len:
                continue
            last = toks[-1] if toks else -1
            psi, nb, b = kernels.ctc_prefix_extend(ctc_lp, r_nb, r_b, last, chars, BLANK)
            for ci, c in enumerate(chars):
                if psi[ci] == -np.inf and lam > 0:
                    continue
                a = att_s + att_lp[hi, c]
                cands.append((_joint(a, psi[ci], lam), hi, int(c), a, float(psi[ci]), nb[ci], b[ci]))
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        new_running = []
        for sc, hi, c, a, cs, nb, b in cands[:beam]:
            toks = running[hi][0]
            if c == eos:
                ended.append(Hypothesis(list(toks), float(sc), a, cs))
            else:
                new_running.append((toks + [c], a, cs, nb, b))
        running = new_running
        if not running:
            break
        best_ended = max((h.score for h in ended), default=-np.inf)
        best_running = max(_joint(r[1], r[2], lam) for r in running)
        # extensions never increase either score component
        if best_ended >= best_running:
            break
    if not ended:
        return Hypothesis([], -np.inf)
    ended.sort(key=lambda h: (-h.score, h.tokens))
    return ended[0]
