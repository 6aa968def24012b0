"""Input interventions, latent interventions, activation patching and mediation.

All operations treat the model as read-only and run in deterministic
analysis mode: z = mu unless an explicit noise array is passed. Whenever two
forward passes are compared they use identical batch shapes, which keeps
null interventions and self-patches bit-exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .engine import Tensor, no_grad
from .models import Forward, ModelBundle

LATENT_SITES = ("mu", "logvar", "z")
DEFAULT_GRID = tuple(np.linspace(-3.0, 3.0, 13))


def _batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 3 else x


@dataclass
class ActivationTrace:
    """Site name -> activation array for one (batched) forward pass."""

    sites: dict[str, np.ndarray]
    x: np.ndarray | None = None
    noise: np.ndarray | None = None

    def __getitem__(self, site: str) -> np.ndarray:
        return self.sites[site]

    def __contains__(self, site: str) -> bool:
        return site in self.sites

    def __iter__(self):
        return iter(self.sites)

    def names(self) -> list[str]:
        return list(self.sites)


def capture(model: ModelBundle, x, noise=None) -> ActivationTrace:
    """Full forward pass with every site recorded."""
    xb = _batch(x)
    fwd = Forward(model)
    if tuple(xb.shape[1:]) != (model.config.channels, model.config.image_size,
                               model.config.image_size):
        raise ValueError(f"capture: bad input shape {xb.shape}")
    with no_grad():
        v = fwd.run({"x": Tensor(xb), "noise": noise})
    return ActivationTrace({s: v[s].data for s in fwd.order}, xb, noise)


def _resume(model: ModelBundle, base: ActivationTrace, splices: dict[str, np.ndarray],
            stop_after: str | None = None) -> ActivationTrace:
    """Re-run the forward pass of ``base`` with the given site values replaced.

    Sites upstream of the earliest splice are reused from ``base``; the
    earliest splice seeds the resumed pass and later ones override the values
    computed in flight.
    """
    fwd = Forward(model)
    for s in splices:
        if s not in fwd.order:
            raise KeyError(f"unknown site {s!r}; known: {fwd.order}")
    if not splices:
        return ActivationTrace(dict(base.sites), base.x, base.noise)
    first = min(splices, key=fwd.order.index)
    upto = fwd.order[:fwd.order.index(first)]
    inputs = {s: Tensor(base.sites[s]) for s in upto}
    inputs[first] = Tensor(splices[first])
    inputs["x"] = Tensor(base.x) if base.x is not None else None
    inputs["noise"] = base.noise
    overrides = {s: (lambda _t, a=a: Tensor(a)) for s, a in splices.items() if s != first}
    with no_grad():
        v = fwd.run(inputs, overrides=overrides, start_after=first, stop_after=stop_after)
    sites = {}
    for s in fwd.order:
        if s in v:
            sites[s] = v[s].data
        elif s in base.sites:
            sites[s] = base.sites[s]
    return ActivationTrace(sites, base.x, base.noise)


# -------------------------------------------------------------- input level

@dataclass
class InputEffect:
    delta_z: np.ndarray
    deltas: dict[str, np.ndarray]


def input_effect(model: ModelBundle, x, x_tilde) -> InputEffect:
    """Per-site activation differences A(x_tilde) - A(x); delta_z is taken at mu."""
    xb, xtb = _batch(x), _batch(x_tilde)
    if xb.shape != xtb.shape:
        raise ValueError(f"input_effect: shape mismatch {xb.shape} vs {xtb.shape}")
    ta, tb = capture(model, xb), capture(model, xtb)
    deltas = {s: tb[s] - ta[s] for s in ta}
    return InputEffect(delta_z=deltas["mu"], deltas=deltas)


# ------------------------------------------------------------- latent level

def _decode_np(model: ModelBundle, z: np.ndarray) -> np.ndarray:
    fwd = Forward(model)
    with no_grad():
        v = fwd.run({"z": Tensor(z)}, start_after="z")
    return v["recon"].data


def _check_dim(model: ModelBundle, dim: int) -> None:
    if not 0 <= dim < model.config.latent_dim:
        raise IndexError(f"latent dimension {dim} out of range [0, {model.config.latent_dim})")


def latent_intervene(model: ModelBundle, x, dim: int, value
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Decode z = mu(x) and z with dimension ``dim`` set to ``value``.

    Returns ``(x_recon_base, x_recon_intervened, delta)`` with
    ``delta = D(z_tilde) - D(z)``. ``value`` may be a scalar or one value per item.
    """
    _check_dim(model, dim)
    z = capture_latent(model, x)
    return intervene_on_z(model, z, dim, value)


def capture_latent(model: ModelBundle, x) -> np.ndarray:
    xb = _batch(x)
    fwd = Forward(model)
    with no_grad():
        v = fwd.run({"x": Tensor(xb), "noise": None}, stop_after="z")
    return v["z"].data


def intervene_on_z(model: ModelBundle, z: np.ndarray, dim: int, value,
                   base: np.ndarray | None = None):
    _check_dim(model, dim)
    if base is None:
        base = _decode_np(model, z)
    zt = z.copy()
    zt[:, dim] = value
    out = _decode_np(model, zt)
    return base, out, out - base


@dataclass
class Traversal:
    grid: np.ndarray
    base: np.ndarray            # (B, C, H, W)
    recons: np.ndarray          # (G, B, C, H, W)

    @property
    def deltas(self) -> np.ndarray:
        return self.recons - self.base[None]

    def step_l2(self) -> np.ndarray:
        """L2 norm of consecutive-step differences, (G-1, B)."""
        d = np.diff(self.recons, axis=0)
        return np.sqrt((d ** 2).reshape(d.shape[0], d.shape[1], -1).sum(axis=2))


def latent_traverse(model: ModelBundle, x, dim: int, grid: Sequence[float] = DEFAULT_GRID,
                    z: np.ndarray | None = None) -> Traversal:
    _check_dim(model, dim)
    grid = np.asarray(list(grid), dtype=np.float64)
    if grid.size == 0:
        raise ValueError("latent_traverse: empty grid")
    if z is None:
        z = capture_latent(model, x)
    base = _decode_np(model, z)
    recons = np.stack([intervene_on_z(model, z, dim, v, base=base)[1] for v in grid])
    return Traversal(grid, base, recons)


# ---------------------------------------------------------- patching level

@dataclass(frozen=True)
class PatchSpec:
    site: str
    unit: int | None  # channel (conv sites) or dimension (latent sites); None = whole site
    donor: str = "x2"


def unit_extent(model: ModelBundle, site: str) -> int:
    from .models import site_shapes

    shapes = site_shapes(model.config, 1)
    if site not in shapes:
        raise KeyError(f"unknown site {site!r}")
    return shapes[site][1]


def _validate_spec(model: ModelBundle, spec: PatchSpec) -> None:
    n = unit_extent(model, spec.site)
    if spec.unit is not None and not 0 <= spec.unit < n:
        raise IndexError(f"unit {spec.unit} out of range for site {spec.site!r} ({n} units)")


def splice(base: np.ndarray, donor: np.ndarray, unit: int | None) -> np.ndarray:
    """Copy of ``base`` with unit ``unit`` (a channel or dimension) taken from ``donor``."""
    if unit is None:
        return donor.copy()
    out = base.copy()
    out[:, unit] = donor[:, unit]
    return out


@dataclass
class PatchResult:
    recon: np.ndarray
    trace: ActivationTrace


def patch(model: ModelBundle, x1, x2, spec: PatchSpec,
          base: ActivationTrace | None = None, donor: ActivationTrace | None = None
          ) -> PatchResult:
    """Run x1 with ``spec.site``/``spec.unit`` replaced by x2's activation."""
    _validate_spec(model, spec)
    base = base if base is not None else capture(model, x1)
    donor = donor if donor is not None else capture(model, x2)
    if base[spec.site].shape != donor[spec.site].shape:
        raise ValueError("patch: x1 and x2 batches differ in shape")
    patched = splice(base[spec.site], donor[spec.site], spec.unit)
    tr = _resume(model, base, {spec.site: patched})
    return PatchResult(tr["recon"], tr)


# --------------------------------------------------------- mediation level

Component = Sequence[tuple[str, "int | None"]]


@dataclass
class MediationResult:
    probe: str
    total_effect: float
    mediated: list[float]
    te_per_item: np.ndarray = field(repr=False)
    me_per_item: list[np.ndarray] = field(repr=False)
    te_per_dim: np.ndarray = field(repr=False)      # summed |delta| per probe dim
    me_per_dim: list[np.ndarray] = field(repr=False)

    def normalized(self, eps: float = 1e-9) -> list[float]:
        return [m / self.total_effect if self.total_effect > eps else 0.0 for m in self.mediated]


def _check_components(model: ModelBundle, components: Sequence[Component]) -> None:
    claimed: dict[str, set] = {}
    for comp in components:
        for site, unit in comp:
            _validate_spec(model, PatchSpec(site, unit))
            units = claimed.setdefault(site, set())
            if None in units or (unit is None and units) or unit in units:
                raise ValueError(f"components overlap at site {site!r} unit {unit}")
            units.add(unit)


def all_sites_component(model: ModelBundle, probe: str = "mu") -> list[tuple[str, None]]:
    """Every site up to and including the probe, whole."""
    order = Forward(model).order
    return [(s, None) for s in order[:order.index(probe) + 1]]


def _probe_flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape[0], -1)


def mediate(model: ModelBundle, x, x_tilde, components: Sequence[Component],
            probe: str = "mu", base: ActivationTrace | None = None,
            donor: ActivationTrace | None = None) -> MediationResult:
    """Total effect and the effect mediated through each component.

    TE = ||probe(x) - probe(x_tilde)||_2 and ME_C = ||probe(x) - probe(x | C from
    x_tilde)||_2, each averaged over the batch.
    """
    if probe not in ("mu", "recon", "z", "logvar"):
        raise ValueError(f"unsupported probe {probe!r}")
    _check_components(model, components)
    base = base if base is not None else capture(model, x)
    donor = donor if donor is not None else capture(model, x_tilde)
    p0 = _probe_flat(base[probe])
    te_items = np.sqrt(((p0 - _probe_flat(donor[probe])) ** 2).sum(axis=1))
    te_dim = np.abs(p0 - _probe_flat(donor[probe])).sum(axis=0)
    me, me_items, me_dim = [], [], []
    for comp in components:
        splices: dict[str, np.ndarray] = {}
        for site, unit in comp:
            cur = splices.get(site, base[site])
            splices[site] = splice(cur, donor[site], unit)
        tr = _resume(model, base, splices, stop_after=probe if probe != "recon" else None)
        d = p0 - _probe_flat(tr[probe])
        items = np.sqrt((d ** 2).sum(axis=1))
        me_items.append(items)
        me.append(float(items.mean()))
        me_dim.append(np.abs(d).sum(axis=0))
    return MediationResult(probe, float(te_items.mean()), me, te_items, me_items, te_dim, me_dim)


def mediation_table(model: ModelBundle, x, x_tilde, sites: Iterable[str], probe: str = "mu",
                    eps: float = 1e-9, channels: bool = True) -> dict:
    """Layer- and channel-level normalized mediation of an input intervention.

    Per (layer, probe-dimension) strength is sum_items |ME| / sum_items |TE| on
    that dimension (0 where TE <= eps). Layer strength is ME / TE with L2
    effects. Channel strength is ME / TE for a single spliced channel.
    """
    sites = list(sites)
    base, donor = capture(model, x), capture(model, x_tilde)
    comps = [[(s, None)] for s in sites]
    res = mediate(model, x, x_tilde, comps, probe, base, donor)
    per_dim = {}
    for s, md in zip(sites, res.me_per_dim):
        per_dim[s] = [float(m / t) if t > eps else 0.0 for m, t in zip(md, res.te_per_dim)]
    out = {"probe": probe, "total_effect": res.total_effect,
           "per_layer": dict(zip(sites, res.normalized(eps))),
           "per_layer_per_dim": per_dim}
    if channels:
        per_channel = {}
        for s in sites:
            if s in LATENT_SITES:
                continue
            n = unit_extent(model, s)
            r = mediate(model, x, x_tilde, [[(s, u)] for u in range(n)], probe, base, donor)
            per_channel[s] = r.normalized(eps)
        out["per_channel"] = per_channel
    return out
