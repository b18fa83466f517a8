"""Batch evaluation harness: plans, metric rows, CSV and JSON reports.

A plan enumerates the cross product of images, mask generators,
prompts, and protection objectives. Every cell protects the image (one
perturbation per image and objective, cached), inpaints the clean and
the protected image with shared sampler seeds, and scores the pair.
All randomness is derived from the plan seed and the row's identity,
so reports are byte-identical across runs and independent of the
order rows happen to execute in.
"""

import csv
import io
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .attack import OBJECTIVES, STAGES, AttackConfig, protect
from .dataset import load_dataset, prompt_tokens
from .denoiser import encode, resize_mask_to_latent
from .diffusion import NoiseSchedule, SamplerConfig, forward_diffuse, inpaint_sample
from .errors import ConfigError
from .masks import box_to_mask, classify_hole, random_shift_mask
from .metrics import attention_divergence, hole_deviation, psnr
from .tensor import Tensor

MASK_GENERATORS = ("seg", "bbox", "inverted", "shifted")

CSV_COLUMNS = (
    "image_id",
    "mask_id",
    "mask_class",
    "prompt",
    "objective",
    "stages",
    "psnr_adv_db",
    "attention_divergence",
    "hole_deviation_vs_clean",
    "hole_deviation_vs_original",
    "latent_l2",
)

_METRIC_COLUMNS = CSV_COLUMNS[6:]


@dataclass(eq=False)
class MetricRow:
    image_id: int
    mask_id: str
    mask_class: str
    prompt: str
    objective: str
    stages: str
    psnr_adv_db: float
    attention_divergence: float
    hole_deviation_vs_clean: float
    hole_deviation_vs_original: float
    latent_l2: float

    def __post_init__(self):
        for name in _METRIC_COLUMNS:
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"metric {name} is not finite")


@dataclass(eq=False)
class ExperimentPlan:
    dataset: str
    images: list
    masks: list
    prompts: list
    objectives: list
    steps: int = 50
    guidance: float = 7.5
    eta: float = 0.06
    alpha0: float = 0.03
    iters: int = 250
    stages: str = "two"
    rho: float = 1.2
    max_shift: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("images", "masks", "prompts", "objectives"):
            vals = list(getattr(self, name))
            if not vals:
                raise ConfigError(f"plan field {name} must be a nonempty list")
            if len(set(vals)) != len(vals):
                raise ConfigError(f"plan field {name} has duplicates")
        for m in self.masks:
            if m not in MASK_GENERATORS:
                raise ConfigError(f"unknown mask generator {m!r}")
        for o in self.objectives:
            if o not in OBJECTIVES:
                raise ConfigError(f"unknown objective {o!r}")
        if self.stages not in STAGES:
            raise ConfigError(f"unknown stage mode {self.stages!r}")

    def row_count(self):
        return (len(self.images) * len(self.masks)
                * len(self.prompts) * len(self.objectives))


_PLAN_SECTIONS = {
    "sampler": ("steps", "guidance"),
    "attack": ("eta", "alpha0", "iters", "stages", "rho"),
}
_PLAN_KEYS = ("dataset", "images", "masks", "prompts", "objectives",
              "sampler", "attack", "max_shift", "seed")


def plan_from_json(text):
    """Parse a plan document; unknown keys anywhere are rejected."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"plan is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("plan must be a JSON object")
    flat = {}
    for key, value in raw.items():
        if key not in _PLAN_KEYS:
            raise ConfigError(f"unknown plan key {key!r}")
        if key in _PLAN_SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"plan section {key!r} must be an object")
            for sub, sval in value.items():
                if sub not in _PLAN_SECTIONS[key]:
                    raise ConfigError(f"unknown plan key {key}.{sub!r}")
                flat[sub] = sval
        else:
            flat[key] = value
    for required in ("dataset", "images", "masks", "prompts", "objectives"):
        if required not in flat:
            raise ConfigError(f"plan is missing {required!r}")
    return ExperimentPlan(**flat)


def _derive_seed(*parts):
    # SeedSequence gives a stable, collision-resistant int from the row key
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def tap_pass(model, image, mask, tokens, eps, t=None, schedule=None):
    """Attention taps of one denoiser pass over (image, mask, prompt)."""
    if schedule is None:
        schedule = NoiseSchedule()
    if t is None:
        t = schedule.t_train
    c = model.config
    x = Tensor(np.asarray(image, dtype=np.float64)[None])
    z_t = forward_diffuse(encode(x, c), int(t), eps, schedule)
    grid = mask.grid.astype(np.float64)
    hole = Tensor(np.broadcast_to(grid, x.data.shape).copy())
    z0m = encode(tz.mul(x, hole), c)
    m_lat = Tensor(resize_mask_to_latent(mask, c)[None, None])
    _, taps = model.predict(z_t, z0m, m_lat, int(t), np.asarray(tokens)[None],
                            want_taps=True)
    return taps


def make_mask(sample, generator, plan):
    """Instantiate one generator for one dataset sample."""
    bounds = sample.seg.shape
    if generator == "seg":
        return sample.seg
    if generator == "bbox":
        return box_to_mask(sample.bbox, bounds)
    if generator == "inverted":
        return box_to_mask(sample.bbox, bounds, hole_inside=False)
    if generator == "shifted":
        rng = np.random.default_rng(_derive_seed(plan.seed, 4, sample.index))
        shifted, _ = random_shift_mask(sample.seg, sample.bbox,
                                       plan.max_shift, rng)
        return shifted
    raise ConfigError(f"unknown mask generator {generator!r}")


def _attack_config(plan, objective, image_idx):
    # seed is keyed by image and the objective's global index so the
    # perturbation never depends on plan list order or row enumeration
    return AttackConfig(
        eta=plan.eta, alpha0=plan.alpha0, iters=plan.iters,
        objective=objective, stages=plan.stages, rho=plan.rho,
        seed=_derive_seed(plan.seed, 1, image_idx, OBJECTIVES.index(objective)),
    )


def _rows_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([getattr(row, col) for col in CSV_COLUMNS])
    return buf.getvalue().encode("utf-8")


def summarize(rows, failures, expected):
    """Aggregation used for the JSON report; order-insensitive."""
    ordered = sorted(rows, key=lambda r: (r.image_id, r.mask_id, r.prompt,
                                          r.objective))
    by_objective = {}
    for objective in sorted({r.objective for r in ordered}):
        stats = {}
        group = [r for r in ordered if r.objective == objective]
        for col in _METRIC_COLUMNS:
            vals = [getattr(r, col) for r in group]
            stats[col] = {"mean": sum(vals) / len(vals),
                          "min": min(vals), "max": max(vals)}
        by_objective[objective] = stats
    return {
        "expected_rows": expected,
        "row_count": len(rows),
        "failures": failures,
        "by_objective": by_objective,
    }


def run_experiment(plan, model, out_dir, schedule=None, order=None):
    """Execute a plan; writes report.csv and summary.json under out_dir.

    order optionally permutes row execution (a testing hook for the
    order-independence contract); reports never depend on it. Returns
    the summary dict. Per-row failures are recorded in the summary and
    the run continues.
    """
    if schedule is None:
        schedule = NoiseSchedule()
    samples = {s.index: s for s in load_dataset(plan.dataset)}
    for idx in plan.images:
        if idx not in samples:
            raise ConfigError(f"plan references missing image {idx}")
    c = model.config

    keys = [
        (ii, mi, pi, oi)
        for ii in range(len(plan.images))
        for mi in range(len(plan.masks))
        for pi in range(len(plan.prompts))
        for oi in range(len(plan.objectives))
    ]
    if order is not None:
        if sorted(order) != list(range(len(keys))):
            raise ConfigError("order must be a permutation of the row indices")
        keys = [keys[i] for i in order]

    delta_cache = {}
    rows, failures = [], []
    for ii, mi, pi, oi in keys:
        image_idx = plan.images[ii]
        generator = plan.masks[mi]
        prompt = plan.prompts[pi]
        objective = plan.objectives[oi]
        sample = samples[image_idx]
        try:
            x = sample.image
            cache_key = (image_idx, objective)
            if cache_key not in delta_cache:
                cfg = _attack_config(plan, objective, image_idx)
                delta_cache[cache_key] = protect(model, x, [sample.bbox], cfg,
                                                 schedule=schedule)
            shot = delta_cache[cache_key]
            mask = make_mask(sample, generator, plan)
            mask_class = classify_hole(mask, sample.bbox).value
            tokens = prompt_tokens(prompt, c.prompt_len, c.vocab)

            sampler = SamplerConfig(plan.steps, plan.guidance,
                                    _derive_seed(plan.seed, 2, image_idx, mi, pi, oi))
            out_clean = inpaint_sample(model, x, mask, tokens, sampler, schedule)
            out_adv = inpaint_sample(model, shot.image_adv, mask, tokens,
                                     sampler, schedule)

            eps = np.random.default_rng(
                _derive_seed(plan.seed, 3, image_idx, mi, pi, oi)
            ).standard_normal((1, c.latent_channels, c.latent_size, c.latent_size))
            taps_clean = tap_pass(model, x, mask, tokens, eps, schedule=schedule)
            taps_adv = tap_pass(model, shot.image_adv, mask, tokens, eps,
                                schedule=schedule)

            z_gap = (encode(Tensor(shot.image_adv[None]), c).data
                     - encode(Tensor(x[None]), c).data)
            rows.append(MetricRow(
                image_id=image_idx,
                mask_id=generator,
                mask_class=mask_class,
                prompt=prompt,
                objective=objective,
                stages=plan.stages,
                psnr_adv_db=psnr(x, shot.image_adv),
                attention_divergence=attention_divergence(taps_clean, taps_adv),
                hole_deviation_vs_clean=hole_deviation(out_adv, out_clean, mask),
                hole_deviation_vs_original=hole_deviation(out_adv, x, mask),
                latent_l2=float(np.sqrt(np.sum(z_gap * z_gap))),
            ))
        except Exception as exc:  # per-row failures must not stop the run
            failures.append({"image_id": image_idx, "mask_id": generator,
                             "prompt": prompt, "objective": objective,
                             "error": f"{type(exc).__name__}: {exc}"})

    rows.sort(key=lambda r: (plan.images.index(r.image_id),
                             plan.masks.index(r.mask_id),
                             plan.prompts.index(r.prompt),
                             plan.objectives.index(r.objective)))
    failures.sort(key=lambda f: (plan.images.index(f["image_id"]),
                                 plan.masks.index(f["mask_id"]),
                                 plan.prompts.index(f["prompt"]),
                                 plan.objectives.index(f["objective"])))
    summary = summarize(rows, failures, plan.row_count())

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.csv"), "wb") as f:
        f.write(_rows_csv(rows))
    with open(os.path.join(out_dir, "summary.json"), "wb") as f:
        f.write((json.dumps(summary, sort_keys=True, indent=2,
                            allow_nan=False) + "\n").encode("utf-8"))
    return summary
