"""Speaker/environment hidden-output transforms and their factorised combinations.

LHUC rescales hidden units by ``2 * sigmoid(r)``; HUB adds a bias. A speaker
(SD) and an environment (ED) transform are combined either linearly (LFA,
convex mix of two LHUC scales) or by cascading them (CFA, speaker first).
Transforms are deterministic vectors or Gaussian posteriors stored as
(mean, log-deviation) pairs and sampled with the reparameterisation trick.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

LHUC = "lhuc"
HUB = "hub"
KINDS = (LHUC, HUB)

SPEAKER = "speaker"
ENV = "env"
JOINT = "joint"
OWNER_TYPES = (SPEAKER, ENV, JOINT)

ADAPT_PREFIX = "adapt."
CACHE_VERSION = 1


# ------------------------------------------------------------------ elementwise algebra


def _vec(v, h: Tensor) -> Tensor:
    """Broadcast a (D,) or per-utterance (B, D) vector against (B, T, D) hidden."""
    v = ad.as_tensor(v)
    D = h.shape[-1]
    if v.shape[-1] != D:
        raise ValueError(f"transform dim {v.shape[-1]} does not match hidden dim {D}")
    if v.ndim == 2 and h.ndim == 3:
        if v.shape[0] != h.shape[0]:
            raise ValueError(f"{v.shape[0]} transform rows for a batch of {h.shape[0]}")
        return ad.reshape(v, (v.shape[0], 1, D))
    return v


def lhuc_scale(r) -> Tensor:
    return ad.mul(ad.sigmoid(r), 2.0)


def lhuc_apply(h, r) -> Tensor:
    h = ad.as_tensor(h)
    return ad.mul(h, lhuc_scale(_vec(r, h)))


def hub_apply(h, bias) -> Tensor:
    h = ad.as_tensor(h)
    return ad.add(h, _vec(bias, h))


def lfa_apply(h, r, n, beta: float) -> Tensor:
    """h * (beta * xi(r) + (1 - beta) * xi(n)).

    Evaluated as ``xi(n) + beta * (xi(r) - xi(n))`` so that beta = 0 and
    r == n reproduce plain LHUC exactly; beta = 1 takes the LHUC(r) branch.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta {beta} outside [0, 1]")
    h = ad.as_tensor(h)
    if beta == 1.0:
        return lhuc_apply(h, r)
    xr = lhuc_scale(_vec(r, h))
    xn = lhuc_scale(_vec(n, h))
    return ad.mul(h, ad.add(xn, ad.mul(ad.sub(xr, xn), beta)))


def cfa_apply(h, r, n, spk_kind: str, env_kind: str, order: str = "speaker-first") -> Tensor:
    """Cascade the speaker transform and then the environment transform.

    Two HUB biases are summed before being added so that the result equals a
    single HUB transform with the summed bias.
    """
    if spk_kind not in KINDS or env_kind not in KINDS:
        raise ValueError(f"unknown transform kinds ({spk_kind}, {env_kind})")
    h = ad.as_tensor(h)
    first, second = (r, spk_kind), (n, env_kind)
    if order == "env-first":
        first, second = second, first
    elif order != "speaker-first":
        raise ValueError(f"unknown cascade order {order!r}")
    (a, ka), (b, kb) = first, second
    if ka == HUB and kb == HUB:
        return ad.add(h, ad.add(_vec(a, h), _vec(b, h)))
    if ka == LHUC and kb == LHUC:
        return ad.mul(ad.mul(h, lhuc_scale(_vec(a, h))), lhuc_scale(_vec(b, h)))
    out = lhuc_apply(h, a) if ka == LHUC else hub_apply(h, a)
    return lhuc_apply(out, b) if kb == LHUC else hub_apply(out, b)


def apply_kind(h, v, kind: str) -> Tensor:
    if kind == LHUC:
        return lhuc_apply(h, v)
    if kind == HUB:
        return hub_apply(h, v)
    raise ValueError(f"unknown transform kind {kind!r}")


def identity_value(kind: str, dim: int) -> np.ndarray:
    # both LHUC (2*sigmoid(0) = 1) and HUB are identities at zero
    return np.zeros(dim)


# ------------------------------------------------------------------ Gaussian pieces


def kl_to_prior(q_mean, q_dev, p_mean, p_dev) -> Tensor:
    """KL(N(q_mean, q_dev²) || N(p_mean, p_dev²)) summed over dimensions."""
    q_mean, q_dev = ad.as_tensor(q_mean), ad.as_tensor(q_dev)
    p_mean = np.broadcast_to(np.asarray(p_mean, dtype=np.float64), q_mean.shape)
    p_dev = np.broadcast_to(np.asarray(p_dev, dtype=np.float64), q_mean.shape)
    if np.any(q_dev.data <= 0) or np.any(p_dev <= 0):
        raise ValueError("kl_to_prior: deviations must be positive")
    var_ratio = ad.mul(ad.square(q_dev), 1.0 / (2.0 * p_dev**2))
    mean_term = ad.mul(ad.square(ad.sub(q_mean, p_mean)), 1.0 / (2.0 * p_dev**2))
    log_term = ad.sub(np.log(p_dev), ad.log(q_dev))
    return ad.tsum(ad.sub(ad.add(ad.add(log_term, var_ratio), mean_term), 0.5))


def kl_from_log_dev(q_mean, q_log_dev, p_mean, p_dev) -> Tensor:
    """Same KL parameterised by log q_dev (avoids log(exp(.)) round trips)."""
    q_mean, q_log_dev = ad.as_tensor(q_mean), ad.as_tensor(q_log_dev)
    p_mean = np.broadcast_to(np.asarray(p_mean, dtype=np.float64), q_mean.shape)
    p_dev = np.broadcast_to(np.asarray(p_dev, dtype=np.float64), q_mean.shape)
    if np.any(p_dev <= 0):
        raise ValueError("kl_to_prior: deviations must be positive")
    inv2 = 1.0 / (2.0 * p_dev**2)
    var_term = ad.mul(ad.exp(ad.mul(q_log_dev, 2.0)), inv2)
    mean_term = ad.mul(ad.square(ad.sub(q_mean, p_mean)), inv2)
    log_term = ad.sub(np.log(p_dev), q_log_dev)
    return ad.tsum(ad.sub(ad.add(ad.add(log_term, var_term), mean_term), 0.5))


def sample_transform(mean, dev, eps) -> Tensor:
    """mean + dev * eps; gradients reach both mean and dev."""
    mean, dev = ad.as_tensor(mean), ad.as_tensor(dev)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != mean.shape or dev.shape != mean.shape:
        raise ValueError(f"sample_transform: shapes {mean.shape}, {dev.shape}, {eps.shape} differ")
    return ad.add(mean, ad.mul(dev, eps))


@dataclass
class PriorSpec:
    """Per-kind Gaussian prior; the second entry is a standard deviation."""

    lhuc: tuple[float, float] = (0.0, 1.0)
    hub: tuple[float, float] = (0.0, 0.001)

    def __post_init__(self):
        for k in KINDS:
            if getattr(self, k)[1] <= 0:
                raise ValueError(f"prior deviation for {k} must be positive")

    def for_kind(self, kind: str) -> tuple[float, float]:
        return getattr(self, kind)


INIT_LOG_DEV = {LHUC: float(np.log(0.1)), HUB: float(np.log(0.001))}


# ------------------------------------------------------------------ transform objects


@dataclass
class FactorTransform:
    owner_type: str
    owner_id: str
    kind: str
    dim: int
    layer: int = 0
    variational: bool = False
    mean: Parameter = None
    log_dev: Parameter | None = None

    def __post_init__(self):
        if self.owner_type not in OWNER_TYPES:
            raise ValueError(f"unknown owner type {self.owner_type!r}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if any(c.isspace() for c in self.owner_id):
            raise ValueError(f"owner id {self.owner_id!r} contains whitespace")
        base = f"{ADAPT_PREFIX}{self.owner_type}.{self.owner_id}"
        if self.mean is None:
            self.mean = Parameter(base + ".mean", identity_value(self.kind, self.dim))
        if self.variational and self.log_dev is None:
            self.log_dev = Parameter(base + ".log_dev", np.full(self.dim, INIT_LOG_DEV[self.kind]))

    @property
    def key(self) -> tuple[str, str]:
        return (self.owner_type, self.owner_id)

    @property
    def dev(self) -> np.ndarray:
        if not self.variational:
            raise ValueError("deterministic transform has no deviation")
        return np.exp(self.log_dev.data)

    def parameters(self) -> list[Parameter]:
        return [self.mean] + ([self.log_dev] if self.variational else [])

    def value(self, eps: np.ndarray | None = None) -> Tensor:
        """Concrete vector: the mean, or mean + dev * eps when sampling."""
        if not self.variational or eps is None:
            return self.mean.t
        return sample_transform(self.mean, ad.exp(self.log_dev), eps)

    def is_identity(self) -> bool:
        return not np.any(self.mean.data)

    def copy(self) -> "FactorTransform":
        return FactorTransform(
            self.owner_type,
            self.owner_id,
            self.kind,
            self.dim,
            self.layer,
            self.variational,
            Parameter(self.mean.name, self.mean.data.copy()),
            None if self.log_dev is None else Parameter(self.log_dev.name, self.log_dev.data.copy()),
        )


@dataclass
class AdaptationMode:
    """Which transforms exist and how they combine.

    ``name`` is one of speaker, env, joint, lfa, cfa. For speaker/env/joint,
    ``spk_kind`` (or ``env_kind`` for env) gives the single transform kind.
    """

    name: str
    beta: float = 0.7
    spk_kind: str = LHUC
    env_kind: str = LHUC
    order: str = "speaker-first"

    def __post_init__(self):
        if self.name not in ("speaker", "env", "joint", "lfa", "cfa"):
            raise ValueError(f"unknown adaptation mode {self.name!r}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta {self.beta} outside [0, 1]")
        if self.spk_kind not in KINDS or self.env_kind not in KINDS:
            raise ValueError("transform kinds must be lhuc or hub")
        if self.name == "lfa" and (self.spk_kind != LHUC or self.env_kind != LHUC):
            raise ValueError("linear factorised adaptation combines two LHUC transforms")

    @property
    def uses_speaker(self) -> bool:
        return self.name in ("speaker", "lfa", "cfa")

    @property
    def uses_env(self) -> bool:
        return self.name in ("env", "lfa", "cfa")

    def owners(self, spk: str, env: str) -> list[tuple[str, str, str]]:
        """(owner_type, owner_id, kind) transforms one (spk, env) utterance reads."""
        out = []
        if self.name == "joint":
            out.append((JOINT, joint_id(spk, env), self.spk_kind))
        if self.uses_speaker:
            out.append((SPEAKER, spk, self.spk_kind))
        if self.uses_env:
            out.append((ENV, env, self.env_kind))
        return out

    def describe(self) -> str:
        if self.name == "lfa":
            return f"lfa(beta={self.beta:g})"
        if self.name == "cfa":
            return f"cfa({self.spk_kind},{self.env_kind})"
        if self.name == "env":
            return f"env({self.env_kind})"
        return f"{self.name}({self.spk_kind})"


def joint_id(spk: str, env: str) -> str:
    return f"{spk}|{env}"


class TransformSet:
    """Transforms keyed by (owner_type, owner_id)."""

    def __init__(self, mode: AdaptationMode, dim: int, variational: bool = False, layer: int = 0):
        self.mode = mode
        self.dim = dim
        self.variational = variational
        self.layer = layer
        self.transforms: dict[tuple[str, str], FactorTransform] = {}
        self.meta: dict[str, str] = {}

    def __contains__(self, key):
        return key in self.transforms

    def __getitem__(self, key) -> FactorTransform:
        try:
            return self.transforms[key]
        except KeyError:
            raise KeyError(f"no transform cached for {key[0]} {key[1]!r}") from None

    def __len__(self):
        return len(self.transforms)

    def keys(self):
        return list(self.transforms)

    def add(self, t: FactorTransform):
        if t.key in self.transforms:
            raise ValueError(f"duplicate transform for {t.key}")
        self.transforms[t.key] = t

    def ensure(self, owner_type: str, owner_id: str, kind: str) -> FactorTransform:
        key = (owner_type, owner_id)
        if key not in self.transforms:
            self.add(FactorTransform(owner_type, owner_id, kind, self.dim, self.layer, self.variational))
        return self.transforms[key]

    def ensure_for(self, pairs) -> "TransformSet":
        for spk, env in pairs:
            for ot, oid, kind in self.mode.owners(spk, env):
                self.ensure(ot, oid, kind)
        return self

    def parameters(self) -> list[Parameter]:
        return [p for t in self.transforms.values() for p in t.parameters()]

    def copy(self) -> "TransformSet":
        out = TransformSet(self.mode, self.dim, self.variational, self.layer)
        for k, t in self.transforms.items():
            out.transforms[k] = t.copy()
        out.meta = dict(self.meta)
        return out

    # -------------------------------------------------------------- applying

    def _owner_matrix(self, owner_type, ids, eps_source):
        uniq = sorted(set(ids))
        rows = []
        for oid in uniq:
            t = self[(owner_type, oid)]
            eps = eps_source(t) if eps_source is not None else None
            rows.append(t.value(eps))
        table = ad.stack(rows)
        return ad.embedding(table, [uniq.index(i) for i in ids])

    def adapter(self, speakers, envs, eps_source=None):
        """Build ``h -> h'`` for a batch whose utterance i is (speakers[i], envs[i]).

        ``eps_source(transform)`` returns the standard-normal draw for one
        variational transform; None uses posterior means.
        """
        mode = self.mode
        speakers, envs = list(speakers), list(envs)

        def fn(h):
            if mode.name == "joint":
                v = self._owner_matrix(JOINT, [joint_id(s, e) for s, e in zip(speakers, envs)], eps_source)
                return apply_kind(h, v, mode.spk_kind)
            if mode.name == "speaker":
                return apply_kind(h, self._owner_matrix(SPEAKER, speakers, eps_source), mode.spk_kind)
            if mode.name == "env":
                return apply_kind(h, self._owner_matrix(ENV, envs, eps_source), mode.env_kind)
            r = self._owner_matrix(SPEAKER, speakers, eps_source)
            n = self._owner_matrix(ENV, envs, eps_source)
            if mode.name == "lfa":
                return lfa_apply(h, r, n, mode.beta)
            return cfa_apply(h, r, n, mode.spk_kind, mode.env_kind, mode.order)

        return fn

    def kl(self, priors: PriorSpec, keys=None) -> Tensor:
        """Sum of independent per-transform KL terms."""
        total = None
        for k in keys if keys is not None else self.transforms:
            t = self.transforms[k]
            if not t.variational:
                continue
            pm, pd = priors.for_kind(t.kind)
            term = kl_from_log_dev(t.mean, t.log_dev, pm, pd)
            total = term if total is None else ad.add(total, term)
        return total if total is not None else Tensor(0.0)

    def posterior_mean(self) -> "TransformSet":
        """Deterministic transforms holding each posterior mean."""
        out = TransformSet(self.mode, self.dim, False, self.layer)
        for k, t in self.transforms.items():
            out.transforms[k] = FactorTransform(
                t.owner_type, t.owner_id, t.kind, t.dim, t.layer, False, Parameter(t.mean.name, t.mean.data.copy())
            )
        out.meta = dict(self.meta)
        return out


def posterior_mean_inference(transforms: TransformSet) -> TransformSet:
    return transforms.posterior_mean()


def bayesian_objective(
    data_loss,
    transforms: TransformSet,
    priors: PriorSpec,
    samples: int = 1,
    kl_weight: float = 1.0,
    rng: np.random.Generator | None = None,
    keys=None,
):
    """Monte Carlo variational bound.

    ``data_loss(adapter_factory)`` evaluates the multitask loss given a
    function that builds adapters for a batch; it is called once per sample
    with a fresh standard-normal draw for every variational transform.
    Returns (objective, mean data term, KL term) tensors.
    """
    if samples < 1:
        raise ValueError("need at least one Monte Carlo sample")
    rng = rng or np.random.default_rng(0)
    total = None
    for _ in range(samples):
        draws: dict[tuple[str, str], np.ndarray] = {}

        def eps_source(t, draws=draws):
            if t.key not in draws:
                draws[t.key] = rng.standard_normal(t.dim)
            return draws[t.key]

        term = data_loss(lambda spk, env, e=eps_source: transforms.adapter(spk, env, e))
        total = term if total is None else ad.add(total, term)
    data = ad.mul(total, 1.0 / samples)
    kl = transforms.kl(priors, keys)
    return ad.add(data, ad.mul(kl, kl_weight)), data, kl


# ------------------------------------------------------------------ cache file
#
#   # factoradapt transform cache
#   format_version = 1
#   model_dim = <D>
#   layer = <layer index, 0 = subsampling output>
#   mode = <speaker|env|joint|lfa|cfa>
#   beta = <float>
#   kind.speaker = <lhuc|hub>
#   kind.env = <lhuc|hub>
#   order = <speaker-first|env-first>
#   parameterization = <deterministic|variational>
#   meta.<key> = <value>            (zero or more provenance lines)
#   ---
#   <owner_type> <owner_id> <D mean values> [<D deviation values>]
#
# Floats are written with repr() so a load reproduces them bit-exactly.


def save_cache(path, transforms: TransformSet):
    m = transforms.mode
    lines = [
        "# factoradapt transform cache",
        f"format_version = {CACHE_VERSION}",
        f"model_dim = {transforms.dim}",
        f"layer = {transforms.layer}",
        f"mode = {m.name}",
        f"beta = {m.beta!r}",
        f"kind.speaker = {m.spk_kind}",
        f"kind.env = {m.env_kind}",
        f"order = {m.order}",
        f"parameterization = {'variational' if transforms.variational else 'deterministic'}",
    ]
    lines += [f"meta.{k} = {v}" for k, v in sorted(transforms.meta.items())]
    lines.append("---")
    for key in sorted(transforms.transforms):
        t = transforms.transforms[key]
        vals = [repr(float(x)) for x in t.mean.data]
        if t.variational:
            vals += [repr(float(x)) for x in t.dev]
        lines.append(" ".join([t.owner_type, t.owner_id, *vals]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_cache(path) -> TransformSet:
    header: dict[str, str] = {}
    records = []
    with open(path) as fh:
        in_body = False
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            if line == "---":
                in_body = True
                continue
            if in_body:
                records.append(line.split(" "))
            else:
                k, _, v = line.partition("=")
                header[k.strip()] = v.strip()
    if int(header.get("format_version", -1)) != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported transform cache version")
    mode = AdaptationMode(
        header["mode"], float(header["beta"]), header["kind.speaker"], header["kind.env"], header["order"]
    )
    dim = int(header["model_dim"])
    variational = header["parameterization"] == "variational"
    ts = TransformSet(mode, dim, variational, int(header["layer"]))
    ts.meta = {k[5:]: v for k, v in header.items() if k.startswith("meta.")}
    for rec in records:
        owner_type, owner_id, vals = rec[0], rec[1], np.array([float(x) for x in rec[2:]])
        want = 2 * dim if variational else dim
        if vals.size != want:
            raise ValueError(f"{path}: {owner_type} {owner_id} has {vals.size} values, expected {want}")
        kind = _kind_for(mode, owner_type)
        t = FactorTransform(owner_type, owner_id, kind, dim, ts.layer, variational)
        t.mean.data[:] = vals[:dim]
        if variational:
            t.log_dev.data[:] = np.log(vals[dim:])
        ts.add(t)
    return ts


def _kind_for(mode: AdaptationMode, owner_type: str) -> str:
    return mode.env_kind if owner_type == ENV else mode.spk_kind
