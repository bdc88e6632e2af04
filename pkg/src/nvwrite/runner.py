"""Campaign orchestration and the ``nvwrite`` command line.

Configuration is a flat text file of dotted ``section.key = value`` lines
(``#`` starts a comment).  Every key has a default; unknown keys are errors.
Lists are comma separated.  Units are fixed per key: lengths in nm, times in
s, rates in counts/s, energies in nJ or eV.

Random numbers come from Philox 4x64 (a counter-based generator).  Site ``k``
of a campaign with master seed ``m`` draws from
``SeedSequence(m, spawn_key=(k,))``, split into independent streams for the
defect kinetics, photon counting and the polarization scan.  Results are
therefore independent of how sites are scheduled across worker processes.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analysis as A
from .feedback import FeedbackPolicy, PolicyKind, SiteResult, run_site
from .kmc import BindingParams, DefectWorld, StrainParams, write_event_log
from .laser import BeamProfile, NonlinearityParams, PulsePlan
from .lattice import AXIS_CLASSES, AxisClass, Orientation, WorldConfig
from .photophysics import (
    EmitterModel,
    HbtHistogram,
    PLImage,
    ThreeLevelParams,
    malus_intensity,
    malus_phase_deg,
    polarization_scan,
    render_pl_image,
    simulate_hbt,
)

EXIT_OK, EXIT_FIT, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArrayConfig:
    rows: int = 5
    cols: int = 5
    spacing_nm: float = 2000.0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("rows and cols must be >= 1")
        if self.spacing_nm <= 0:
            raise ValueError("spacing_nm must be positive")

    def target(self, index: int) -> tuple[float, float]:
        r, c = divmod(index, self.cols)
        return c * self.spacing_nm, r * self.spacing_nm


@dataclass(frozen=True)
class ImagingConfig:
    """Confocal readout of a finished array."""

    psf_fwhm: float = 200.0  # nm
    pixel_nm: float = 20.0
    dwell_s: float = 0.001  # per pixel
    noise: bool = True

    def __post_init__(self):
        if self.psf_fwhm <= 0 or self.pixel_nm <= 0 or self.dwell_s <= 0:
            raise ValueError("imaging parameters must be positive")


@dataclass(frozen=True)
class PolarizationConfig:
    step_deg: float = 10.0
    span_deg: float = 180.0
    dwell_s: float = 1.0
    threshold: float = 0.5

    def __post_init__(self):
        if self.step_deg <= 0 or self.span_deg < 180.0 or self.dwell_s <= 0:
            raise ValueError("need step_deg > 0, span_deg >= 180 and dwell_s > 0")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")

    @property
    def angles(self) -> np.ndarray:
        n = int(round(self.span_deg / self.step_deg))
        return self.step_deg * np.arange(n + 1)


SECTIONS = {
    "world": WorldConfig,
    "beam": BeamProfile,
    "plan": PulsePlan,
    "nonlinearity": NonlinearityParams,
    "strain": StrainParams,
    "binding": BindingParams,
    "emitter": EmitterModel,
    "policy": FeedbackPolicy,
    "array": ArrayConfig,
    "imaging": ImagingConfig,
    "polarization": PolarizationConfig,
}
FIXED_FIELDS = {("strain", "charges")}
OPTIONAL_TYPES = {("policy", "lo"): float, ("policy", "hi"): float, ("policy", "target"): int}


def _fields(section: str):
    return [f for f in dataclasses.fields(SECTIONS[section]) if (section, f.name) not in FIXED_FIELDS]


def _default(f):
    return f.default if f.default is not dataclasses.MISSING else f.default_factory()


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, PolicyKind):
        return value.value
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(section: str, f, text: str):
    text = text.strip()
    proto = _default(f)
    key = (section, f.name)
    try:
        if key in OPTIONAL_TYPES:
            if text.lower() == "none":
                return None
            v = float(text)
            return int(v) if OPTIONAL_TYPES[key] is int else v
        if isinstance(proto, PolicyKind):
            return PolicyKind(text)
        if isinstance(proto, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if isinstance(proto, int):
            v = float(text)
            if v != int(v):
                raise ValueError(text)
            return int(v)
        if isinstance(proto, float):
            return float(text)
        if isinstance(proto, tuple):
            parts = [p.strip() for p in text.split(",")]
            if len(parts) != len(proto):
                raise ValueError(f"expected {len(proto)} values")
            return tuple(type(d)(float(p)) for d, p in zip(proto, parts))
        return text
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{section}.{f.name}: cannot parse {text!r} ({exc})") from None


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    beam: BeamProfile = field(default_factory=BeamProfile)
    plan: PulsePlan = field(default_factory=PulsePlan)
    nonlinearity: NonlinearityParams = field(default_factory=NonlinearityParams)
    strain: StrainParams = field(default_factory=StrainParams)
    binding: BindingParams = field(default_factory=BindingParams)
    emitter: EmitterModel = field(default_factory=EmitterModel)
    policy: FeedbackPolicy = field(default_factory=FeedbackPolicy)
    array: ArrayConfig = field(default_factory=ArrayConfig)
    imaging: ImagingConfig = field(default_factory=ImagingConfig)
    polarization: PolarizationConfig = field(default_factory=PolarizationConfig)
    master_seed: int = 20190101

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2**64:
            raise ConfigError("master_seed must be a 64-bit unsigned integer")

    # -------------------------------------------------------------- text form
    def to_text(self) -> str:
        lines = [f"master_seed = {self.master_seed}"]
        for name in SECTIONS:
            obj = getattr(self, name)
            for f in _fields(name):
                lines.append(f"{name}.{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, overrides: Sequence[str] = ()) -> "ExperimentConfig":
        values: dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            k, v = line.split("=", 1)
            values[k.strip()] = v.strip()
        for ov in overrides:
            if "=" not in ov:
                raise ConfigError(f"override {ov!r}: expected key=value")
            k, v = ov.split("=", 1)
            values[k.strip()] = v.strip()
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "ExperimentConfig":
        values = dict(values)
        kwargs = {}
        if "master_seed" in values:
            try:
                kwargs["master_seed"] = int(values.pop("master_seed"))
            except ValueError:
                raise ConfigError("master_seed must be an integer") from None
        for name, klass in SECTIONS.items():
            sect = {}
            for f in _fields(name):
                key = f"{name}.{f.name}"
                if key in values:
                    sect[f.name] = _parse(name, f, values.pop(key))
            try:
                kwargs[name] = klass(**sect)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"[{name}] {exc}") from None
        if values:
            raise ConfigError("unknown configuration keys: " + ", ".join(sorted(values)))
        return cls(**kwargs)

    @classmethod
    def load(cls, path, overrides: Sequence[str] = ()) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8") if path is not None else ""
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        return cls.from_text(text, overrides)

    def with_overrides(self, overrides: Sequence[str]) -> "ExperimentConfig":
        return self.from_text(self.to_text(), overrides)


# ---------------------------------------------------------------- RNG streams

def site_streams(master_seed: int, site_index: int, n: int = 3) -> list[np.random.Generator]:
    """Independent Philox generators for one site: kinetics, counting, polarization."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(site_index),))
    return [np.random.Generator(np.random.Philox(child)) for child in ss.spawn(n)]


# ---------------------------------------------------------------- one site

@dataclass
class SiteRecord:
    """A SiteResult plus the polarization measurement of whatever was written."""

    result: SiteResult
    visibility: float = float("nan")
    phi_deg: float = float("nan")
    measured_class: str = ""

    def row(self) -> dict[str, str]:
        r = self.result
        pos = r.nv_positions_nm
        return {
            "site_index": str(r.site_index),
            "target_x_nm": repr(r.target_x_nm),
            "target_y_nm": repr(r.target_y_nm),
            "outcome": r.outcome,
            "n_nv_truth": str(r.n_nv_truth),
            "n_nv_inferred": str(r.n_nv_inferred),
            "orientations": ";".join(r.orientations),
            "pulses_used": str(r.pulses_used),
            "seconds_elapsed": repr(r.seconds_elapsed),
            "final_rate": f"{r.final_rate:.3f}",
            "nv_dx_nm": ";".join(f"{p[0]:.4f}" for p in pos),
            "nv_dy_nm": ";".join(f"{p[1]:.4f}" for p in pos),
            "nv_dz_nm": ";".join(f"{p[2]:.4f}" for p in pos),
            "nv_in_plane": ";".join("1" if v else "0" for v in r.nv_in_plane),
            "nv_rates": ";".join(f"{v:.3f}" for v in r.nv_rates),
            "visibility": "" if math.isnan(self.visibility) else f"{self.visibility:.6f}",
            "phi_deg": "" if math.isnan(self.phi_deg) else f"{self.phi_deg:.4f}",
            "measured_class": self.measured_class,
        }


REPORT_COLUMNS = list(SiteRecord(SiteResult(0, 0.0, 0.0, "", 0, 0, [], 0, 0.0)).row())


def measure_polarization(result: SiteResult, cfg: ExperimentConfig, rng: np.random.Generator):
    """Rotating-polarizer scan of the NVs left at a site, then a Malus fit."""

    pol = cfg.polarization
    angles = pol.angles
    mean = np.full(angles.shape, cfg.emitter.background * pol.dwell_s)
    for axis, rate in zip(result.orientations, result.nv_rates):
        o = Orientation(AxisClass(axis))
        vis = cfg.emitter.visibility(o)
        m = rate * pol.dwell_s
        mean += malus_intensity(angles, m * (1.0 - vis), 2.0 * vis * m, malus_phase_deg(o))
    counts = rng.poisson(mean).astype(float)
    fit = A.fit_malus(angles, counts)
    vis = float(fit.extra["visibility"])
    cls = A.classify_orientation(min(max(vis, 0.0), 1.0), pol.threshold)
    return vis, fit.params["phi"], cls.value


def simulate_one_site(cfg: ExperimentConfig, site_index: int, keep_events: bool = True) -> SiteRecord:
    kin, det, pol = site_streams(cfg.master_seed, site_index)
    world = DefectWorld(cfg.world, cfg.beam, cfg.nonlinearity, cfg.strain, cfg.binding, rng=kin)
    result = run_site(world, cfg.plan, cfg.policy, cfg.emitter, rng=det, site_index=site_index,
                      target_nm=cfg.array.target(site_index), keep_events=keep_events)
    rec = SiteRecord(result)
    if result.done and result.n_nv_truth > 0:
        rec.visibility, rec.phi_deg, rec.measured_class = measure_polarization(result, cfg, pol)
    return rec


def _site_job(args) -> SiteRecord:
    text, index, keep_events = args
    return simulate_one_site(ExperimentConfig.from_text(text), index, keep_events)


def run_sites(cfg: ExperimentConfig, indices: Sequence[int], workers: int = 1, keep_events: bool = True) -> list[SiteRecord]:
    """Simulate the given sites; output order follows ``indices``."""
    jobs = [(cfg.to_text(), int(i), keep_events) for i in indices]
    if workers <= 1 or len(jobs) <= 1:
        return [_site_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_site_job, jobs, chunksize=1))


# ---------------------------------------------------------------- campaign report

def _floats(cell: str) -> list[float]:
    return [float(v) for v in cell.split(";")] if cell else []


def aggregate(rows: Sequence[dict[str, str]]) -> dict[str, str]:
    """Summary statistics, computed from report rows only."""
    n = len(rows)
    done = [r for r in rows if r["outcome"] == "Done"]
    nv = [int(r["n_nv_truth"]) for r in done]
    out = {
        "n_sites": str(n),
        "n_done": str(len(done)),
        "n_aborted_damage": str(sum(r["outcome"] == "Aborted:DAMAGE" for r in rows)),
        "n_aborted_budget": str(sum(r["outcome"] == "Aborted:BUDGET" for r in rows)),
        "single_fraction_done": f"{(sum(v == 1 for v in nv) / len(done)) if done else 0.0:.6f}",
        "single_yield_all": f"{(sum(v == 1 for v in nv) / n) if n else 0.0:.6f}",
        "inferred_matches_truth": f"{(sum(r['n_nv_inferred'] == r['n_nv_truth'] for r in done) / len(done)) if done else 0.0:.6f}",
    }
    hist = {"[111]": 0, "[11-1]": 0, "[1-11]": 0, "[-111]": 0}
    for r in done:
        for o in filter(None, r["orientations"].split(";")):
            hist[o] += 1
    out.update({f"orientation_truth{k}": str(v) for k, v in hist.items()})
    out["measured_in_plane"] = str(sum(r["measured_class"] == "InPlane" for r in done))
    out["measured_out_of_plane"] = str(sum(r["measured_class"] == "OutOfPlane" for r in done))
    single = [r for r in done if int(r["n_nv_truth"]) == 1]
    if len(single) >= 2:
        res = [(float(r["nv_dx_nm"]), float(r["nv_dy_nm"])) for r in single]
        s = A.mle_sigma(res)
        out["position_sigma_nm"] = f"{s['sigma']:.4f}"
        out["position_sigma_err_nm"] = f"{s.uncertainties['sigma']:.4f}"
    depths = [float(r["nv_dz_nm"]) for r in single]
    if len(depths) >= 4:
        lor = A.fit_lorentzian(depths)
        out["depth_z0_nm"] = f"{lor['z0']:.4f}"
        out["depth_hwhm_nm"] = f"{lor['gamma']:.4f}"
    return out


@dataclass
class CampaignReport:
    rows: list[dict[str, str]]
    aggregates: dict[str, str]

    @classmethod
    def from_records(cls, records: Sequence[SiteRecord]) -> "CampaignReport":
        rows = [r.row() for r in records]
        return cls(rows, aggregate(rows))

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "report.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, REPORT_COLUMNS, lineterminator="\n")
            w.writeheader()
            w.writerows(self.rows)
        (d / "summary.txt").write_text("".join(f"{k}={v}\n" for k, v in self.aggregates.items()), encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "CampaignReport":
        d = Path(directory)
        with open(d / "report.csv", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        stored = dict(line.split("=", 1) for line in (d / "summary.txt").read_text(encoding="utf-8").splitlines() if line)
        fresh = aggregate(rows)
        if stored != fresh:
            bad = sorted(k for k in set(stored) | set(fresh) if stored.get(k) != fresh.get(k))
            raise ValueError("summary.txt disagrees with report.csv for: " + ", ".join(bad))
        return cls(rows, fresh)


def array_emitters(rows: Sequence[dict[str, str]]) -> list[tuple[float, float, float]]:
    """(x, y, rate) of every NV left at a Done site, in sample coordinates."""
    out = []
    for r in rows:
        if r["outcome"] != "Done":
            continue
        tx, ty = float(r["target_x_nm"]), float(r["target_y_nm"])
        for dx, dy, rate in zip(_floats(r["nv_dx_nm"]), _floats(r["nv_dy_nm"]), _floats(r["nv_rates"])):
            out.append((tx + dx, ty + dy, rate))
    return out


def image_array(emitters, cfg: ExperimentConfig, rng: np.random.Generator | None) -> PLImage:
    """Confocal scan of emitters given as (x, y, rate); peak counts = rate * dwell."""
    im = cfg.imaging
    ar = cfg.array
    pad = 3.0 * im.psf_fwhm
    extent = (-pad, (ar.cols - 1) * ar.spacing_nm + pad, -pad, (ar.rows - 1) * ar.spacing_nm + pad)
    em = [(x, y, rate * im.dwell_s) for x, y, rate in emitters]
    return render_pl_image(em, im.psf_fwhm, im.pixel_nm, extent, cfg.emitter.background * im.dwell_s,
                           noise=im.noise, rng=rng)


def write_array(cfg: ExperimentConfig, out, workers: int = 1) -> CampaignReport:
    out = Path(out)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    (out / "events").mkdir(parents=True, exist_ok=True)
    n = cfg.array.rows * cfg.array.cols
    records = run_sites(cfg, range(n), workers)
    for rec in records:
        k = rec.result.site_index
        rec.result.trace.to_csv(out / "traces" / f"site_{k:04d}.csv")
        write_event_log(rec.result.events, out / "events" / f"site_{k:04d}.log")
    report = CampaignReport.from_records(records)
    report.write(out)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    img_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.master_seed, spawn_key=(2**32,))))
    image_array(array_emitters(report.rows), cfg, img_rng).save(out / "image.txt")
    return report


# ---------------------------------------------------------------- array analysis

def analyze_array(image: PLImage, rows: int, cols: int, spacing: float, depths=None, psf_fwhm: float = 200.0) -> dict:
    """Localise spots, register them to the grid and estimate the placement scatter."""
    spots = A.localize(image, psf_fwhm)
    pts = [(e.x, e.y) for e in spots]
    matched, _ = A.match_to_grid(pts, rows, cols, spacing)
    n_matched = int(np.sum(np.isfinite(matched[:, 0])))
    out = {"n_spots": len(spots), "n_matched": n_matched, "n_nodes": rows * cols}
    if n_matched >= 3:
        grid = A.fit_grid(matched, rows, cols)
        sig = A.mle_sigma(grid.extra["residuals"])
        # the grid fit spends len(GRID_PARAMS) of the 2N coordinates, so rescale the ML width
        dof = 2 * n_matched
        inflate = math.sqrt(dof / (dof - len(A.GRID_PARAMS))) if dof > len(A.GRID_PARAMS) else float("nan")
        out.update({f"grid_{k}": v for k, v in grid.params.items()})
        out["sigma_mle_nm"] = sig["sigma"]
        out["sigma_nm"] = sig["sigma"] * inflate
        out["sigma_err_nm"] = sig.uncertainties["sigma"] * inflate
        out["residuals"] = grid.extra["residuals"]
        out["converged"] = grid.converged
    if depths is not None and len(depths) >= 4:
        lor = A.fit_lorentzian(depths)
        out["depth_z0_nm"] = lor["z0"]
        out["depth_hwhm_nm"] = lor["gamma"]
        out["depth_hwhm_err_nm"] = lor.uncertainties["gamma"]
    return out


def synthetic_array(rows: int, cols: int, spacing: float, sigma: float, rate: float, rng: np.random.Generator):
    """Emitters scattered about grid nodes with isotropic Gaussian width ``sigma``."""
    rr, cc = np.divmod(np.arange(rows * cols), cols)
    xy = np.column_stack([cc * spacing, rr * spacing]) + rng.normal(0.0, sigma, (rows * cols, 2))
    return [(float(x), float(y), float(rate)) for x, y in xy]


# ---------------------------------------------------------------- golden inputs

def make_golden_inputs(directory) -> dict[str, Path]:
    """Regenerate the bundled synthetic inputs for the analyze-* commands."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(7, spawn_key=(0,))))
    hbt = simulate_hbt(1, 150000.0, 50000.0, 60.0, ThreeLevelParams(), rng)
    hbt.to_csv(d / "hbt_single.csv")

    o = Orientation(AXIS_CLASSES[2])
    scan = polarization_scan(o, EmitterModel(), np.arange(0, 181, 10.0), shot_noise=True, rng=rng, rate=10000.0)
    with open(d / "malus_in_plane.csv", "w", encoding="utf-8") as fh:
        fh.write(f"# phi_true_deg={malus_phase_deg(o)!r}\ntheta_deg,intensity\n")
        fh.writelines(f"{t!r},{v!r}\n" for t, v in scan)
    t = np.linspace(10.0, 600.0, 60)
    y = A.stretched_exp(t, 170.0, 1.5) + rng.normal(0.0, 0.01, t.size)
    with open(d / "echo_t2_170us.csv", "w", encoding="utf-8") as fh:
        fh.write("# T2_true_us=170.0 alpha_true=1.5\nt_us,signal\n")
        fh.writelines(f"{float(a)!r},{float(b)!r}\n" for a, b in zip(t, y))
    return {"hbt": d / "hbt_single.csv", "malus": d / "malus_in_plane.csv", "echo": d / "echo_t2_170us.csv"}


def golden_dir() -> Path:
    return Path(__file__).with_name("data")


# ---------------------------------------------------------------- CLI helpers

def _read_xy(path, xcol: str, ycol: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(io.StringIO("".join(lines))))
    if not rows or xcol not in rows[0] or ycol not in rows[0]:
        raise ConfigError(f"{path}: expected columns {xcol},{ycol}")
    return np.array([float(r[xcol]) for r in rows]), np.array([float(r[ycol]) for r in rows])


def _emit(lines: Sequence[str], out: Path | None, name: str) -> None:
    text = "".join(line + "\n" for line in lines)
    sys.stdout.write(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text, encoding="utf-8")


def _fit_lines(fit: A.FitResult, prefix: str = "") -> list[str]:
    return [prefix + ln for ln in fit.to_lines()]


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config, args.override or [])
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, master_seed=int(args.seed))
    return cfg


def cmd_write_array(args) -> int:
    cfg = _config(args)
    report = write_array(cfg, Path(args.out), workers=args.workers)
    _emit([f"{k}={v}" for k, v in report.aggregates.items()], None, "")
    return EXIT_OK


def cmd_simulate_site(args) -> int:
    cfg = _config(args)
    rec = simulate_one_site(cfg, args.site)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rec.result.trace.to_csv(out / f"site_{args.site:04d}_trace.csv")
    write_event_log(rec.result.events, out / f"site_{args.site:04d}_events.log")
    _emit([f"{k}={v}" for k, v in rec.row().items()], out, f"site_{args.site:04d}.txt")
    return EXIT_OK


def cmd_analyze_array(args) -> int:
    out = Path(args.out) if args.out else None
    depths = None
    if args.report:
        rep = CampaignReport.load(args.report)
        cfg = ExperimentConfig.load(Path(args.report) / "config.txt")
        image = PLImage.load(args.image or Path(args.report) / "image.txt")
        rows, cols, spacing = cfg.array.rows, cfg.array.cols, cfg.array.spacing_nm
        depths = [float(r["nv_dz_nm"]) for r in rep.rows if r["outcome"] == "Done" and r["n_nv_truth"] == "1"]
        n_expected = sum(r["outcome"] == "Done" and int(r["n_nv_truth"]) > 0 for r in rep.rows)
        psf = cfg.imaging.psf_fwhm
    else:
        if not args.image:
            raise ConfigError("analyze-array needs --report or --image")
        cfg = _config(args)
        image = PLImage.load(args.image)
        rows, cols, spacing, psf = cfg.array.rows, cfg.array.cols, cfg.array.spacing_nm, cfg.imaging.psf_fwhm
        n_expected = rows * cols
    res = analyze_array(image, rows, cols, spacing, depths, psf)
    lines = [f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in res.items() if k != "residuals"]
    lines.append(f"n_expected={n_expected}")
    lines.append(f"count_mismatch={res['n_matched'] - n_expected}")
    _emit(lines, out, "array_analysis.txt")
    if out is not None and "residuals" in res:
        np.savetxt(out / "residuals.csv", res["residuals"], delimiter=",", header="dx_nm,dy_nm", comments="", fmt="%.6f")
    return EXIT_OK if res.get("converged", False) else EXIT_FIT


def cmd_analyze_g2(args) -> int:
    hist = HbtHistogram.from_csv(args.input)
    a = A.g2_background_params(args.signal, args.background)
    raw = hist.normalized()
    g = A.g2_correct(raw, a)
    fit = A.fit_g2(hist.tau, g, free_depth=True)
    mid = int(np.argmin(np.abs(hist.tau)))
    lines = [f"a={a!r}", f"g2_zero_bin={float(g[mid])!r}"] + _fit_lines(fit)
    out = Path(args.out) if args.out else None
    _emit(lines, out, "g2_fit.txt")
    if out is not None:
        model = 1.0 - fit["depth"] * (1.0 - A.g2_three_level(hist.tau, fit["c"], fit["tau2"], fit["tau3"]))
        np.savetxt(out / "g2_corrected.csv", np.column_stack([hist.tau, raw, g, model]), delimiter=",",
                   header="tau_ns,g2_raw,g2_corrected,g2_model", comments="", fmt="%.6g")
    return EXIT_OK if fit.converged else EXIT_FIT


def cmd_analyze_polarization(args) -> int:
    th, y = _read_xy(args.input, "theta_deg", "intensity")
    fit = A.fit_malus(th, y)
    cls = A.classify_orientation(min(max(fit.extra["visibility"], 0.0), 1.0), args.threshold)
    lines = _fit_lines(fit) + [f"class={cls.value}"]
    _emit(lines, Path(args.out) if args.out else None, "malus_fit.txt")
    return EXIT_OK if fit.converged else EXIT_FIT


def cmd_fit_echo(args) -> int:
    t, y = _read_xy(args.input, "t_us", "signal")
    fit = A.fit_echo(t, y)
    lines = [ln.replace("T2", "T2_us", 1) if ln.startswith("T2") else ln for ln in _fit_lines(fit)]
    _emit(lines, Path(args.out) if args.out else None, "echo_fit.txt")
    return EXIT_OK if fit.converged else EXIT_FIT


def cmd_report(args) -> int:
    rep = CampaignReport.load(args.out)
    width = max(len(k) for k in rep.aggregates)
    lines = [f"{k.ljust(width)}  {v}" for k, v in rep.aggregates.items()]
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nvwrite", description="Laser writing of NV centres: simulation and analysis.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--config", help="flat key = value configuration file")
        sp.add_argument("--seed", type=int, help="master seed (overrides master_seed)")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--override", action="append", metavar="KEY=VALUE", help="set one configuration key")

    sp = sub.add_parser("write-array", help="process every site of the array")
    common(sp, out_required=True)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_write_array)

    sp = sub.add_parser("simulate-site", help="process a single site and save its trace")
    common(sp, out_required=True)
    sp.add_argument("--site", type=int, default=0)
    sp.set_defaults(func=cmd_simulate_site)

    sp = sub.add_parser("analyze-array", help="localise, fit the grid, estimate scatter")
    common(sp)
    sp.add_argument("--report", help="directory written by write-array")
    sp.add_argument("--image", help="PL image file (defaults to <report>/image.txt)")
    sp.set_defaults(func=cmd_analyze_array)

    sp = sub.add_parser("analyze-g2", help="background-correct and fit an HBT histogram")
    common(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--signal", type=float, required=True, help="emitter count rate S")
    sp.add_argument("--background", type=float, required=True, help="background count rate B")
    sp.set_defaults(func=cmd_analyze_g2)

    sp = sub.add_parser("analyze-polarization", help="Malus fit and orientation class")
    common(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.set_defaults(func=cmd_analyze_polarization)

    sp = sub.add_parser("fit-echo", help="stretched-exponential Hahn-echo fit")
    common(sp)
    sp.add_argument("--input", required=True)
    sp.set_defaults(func=cmd_fit_echo)

    sp = sub.add_parser("report", help="print the aggregates of a campaign directory")
    sp.add_argument("--out", required=True, help="directory written by write-array")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return int(args.func(args))
    except (ConfigError, FileNotFoundError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONFIG
    except ValueError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_FIT


if __name__ == "__main__":
    sys.exit(main())
