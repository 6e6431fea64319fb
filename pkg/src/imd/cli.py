"""Command-line entry point.

Every command is reproducible from (config file, seed): reports are written
with sorted keys and no timestamps; wall-clock timing goes to a separate
``run.log`` next to each report.
"""

from __future__ import annotations

import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np
from PIL import Image as PilImage, ImageDraw

from .cipm import PROMPT_MODES
from .core import InvariantError, MatchingConfig, cache_dir
from .datasets import generate_dataset, load_dataset, load_image, PairRecord
from .evalsuite import (
    HOMOGRAPHY_THRESHOLDS_PX,
    POSE_THRESHOLDS_DEG,
    EstimationError,
    aggregate_imim,
    auc,
    corner_error,
    estimate_homography,
    estimate_pose,
    imim_score,
    pose_error,
    ImimReport,
)
from .pipeline import load_checkpoint, match_pair
from .train import train_model

DEFAULT_PROMPT_MODE = "cross"


def _write_json(path: Path, payload: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _log_line(out_dir: Path, text: str) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run.log", "a") as f:
        f.write(f"[{time.strftime('%Y-%m-%dT%H:%M:%S')}] {text}\n")


def _load_config(config_path: str | None, **overrides) -> tuple[MatchingConfig, dict]:
    raw = {}
    if config_path:
        raw = json.loads(Path(config_path).read_text())
    for k, v in overrides.items():
        if v is not None:
            raw[k] = v
    return MatchingConfig.from_dict(raw), raw


@click.group()
def main():
    """Desk-scale prompt-conditioned image matcher."""


# ---------------------------------------------------------------------------
# config


@main.group()
def config():
    """Config file helpers."""


@config.command("init")
@click.option("--out", type=click.Path(), default="imd-config.json", show_default=True)
def config_init(out):
    """Dump every default explicitly to a flat JSON config."""
    cfg = MatchingConfig()
    payload = cfg.to_dict()
    payload["prompt_mode"] = DEFAULT_PROMPT_MODE
    payload["cache"] = str(cache_dir())
    _write_json(Path(out), payload)
    click.echo(f"wrote {out}")


# ---------------------------------------------------------------------------
# gen-data


@main.command("gen-data")
@click.option("--kind", type=click.Choice(["warp", "multi-instance", "posed"]), required=True)
@click.option("--n", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--size", type=int, default=64, show_default=True)
@click.option("--warp-magnitude", type=float, default=1.0, show_default=True)
@click.option("--holdout-every", type=int, default=10, show_default=True,
              help="Every k-th pair goes to the val split (0 = none).")
def gen_data(kind, n, seed, out, size, warp_magnitude, holdout_every):
    """Generate a synthetic dataset directory with index.json."""
    t0 = time.monotonic()
    records = generate_dataset(
        Path(out), kind, n, seed, size=size,
        warp_magnitude=warp_magnitude, holdout_every=holdout_every,
    )
    _log_line(Path(out), f"gen-data kind={kind} n={n} took {time.monotonic() - t0:.1f}s")
    click.echo(f"wrote {len(records)} records to {out}/index.json")


# ---------------------------------------------------------------------------
# train


@main.command("train")
@click.option("--data", type=click.Path(exists=True), required=True, help="index.json path")
@click.option("--out", type=click.Path(), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--steps", type=int, default=2000, show_default=True)
@click.option("--lr", type=float, default=4e-3, show_default=True)
@click.option("--batch", type=int, default=4, show_default=True)
@click.option("--focal-gamma", type=float, default=2.0, show_default=True)
@click.option("--prompt-mode", type=click.Choice(PROMPT_MODES), default=None)
@click.option("--timestep", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--checkpoint-every", type=int, default=0, show_default=True)
@click.option("--split", default="train", show_default=True)
def cmd_train(data, out, config_path, steps, lr, batch, focal_gamma,
              prompt_mode, timestep, seed, checkpoint_every, split):
    """Train the matcher and write checkpoints under --out."""
    cfg, raw = _load_config(config_path, timestep=timestep, seed=seed)
    mode = prompt_mode or raw.get("prompt_mode", DEFAULT_PROMPT_MODE)
    records = [r for r in load_dataset(Path(data)) if r.split == split]
    t0 = time.monotonic()
    _, history = train_model(
        records, cfg, steps=steps, lr=lr, batch=batch, focal_gamma=focal_gamma,
        prompt_mode=mode, checkpoint_every=checkpoint_every, out_dir=Path(out),
    )
    _log_line(Path(out), f"train steps={steps} took {time.monotonic() - t0:.1f}s")
    with open(Path(out) / "history.jsonl", "w") as f:
        for row in history:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    click.echo(f"checkpoint at {Path(out) / 'final'}")


# ---------------------------------------------------------------------------
# match


def _draw_overlay(img_a, img_b, fine, path: Path, consistent=None) -> None:
    """Side-by-side pair with match segments; green = consistent, red = not."""
    ha, wa = img_a.height, img_a.width
    hb, wb = img_b.height, img_b.width
    canvas = PilImage.new("RGB", (wa + wb, max(ha, hb)))
    canvas.paste(PilImage.fromarray(img_a.pixels), (0, 0))
    canvas.paste(PilImage.fromarray(img_b.pixels), (wa, 0))
    draw = ImageDraw.Draw(canvas)
    for k in range(len(fine)):
        good = True if consistent is None else bool(consistent[k])
        color = (0, 220, 0) if good else (220, 0, 0)
        draw.line(
            [(fine.xa[k], fine.ya[k]), (fine.xb[k] + wa, fine.yb[k])],
            fill=color, width=1,
        )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    canvas.save(path)


@main.command("match")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--image-a", type=click.Path(exists=True), required=True)
@click.option("--image-b", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True, help="output directory")
@click.option("--prompt-mode", type=click.Choice(PROMPT_MODES), default=None)
@click.option("--overlay/--no-overlay", default=False, show_default=True)
def cmd_match(checkpoint, image_a, image_b, out, prompt_mode, overlay):
    """Match one pair; writes matches.jsonl. Exit 0 on matches, 2 on none."""
    out = Path(out)
    try:
        model, cfg = load_checkpoint(Path(checkpoint))
    except InvariantError as e:
        click.echo(str(e), err=True)
        sys.exit(1)
    img_a = load_image(Path(image_a))
    img_b = load_image(Path(image_b))
    # Constant images carry nothing to localize; border cells would still
    # "match" through conv padding, so refuse the pair instead.
    if img_a.pixels.std() == 0 or img_b.pixels.std() == 0:
        out.mkdir(parents=True, exist_ok=True)
        (out / "matches.jsonl").write_text("")
        _log_line(out, "match refused: zero-texture input")
        click.echo("no matches", err=True)
        sys.exit(2)
    t0 = time.monotonic()
    coarse, fine = match_pair(
        model, img_a, img_b, cfg, prompt_mode=prompt_mode or DEFAULT_PROMPT_MODE
    )
    out.mkdir(parents=True, exist_ok=True)
    from .core import COARSE_STRIDE, cell_center

    grid_w = (img_b.width + COARSE_STRIDE - 1) // COARSE_STRIDE
    grid_wa = (img_a.width + COARSE_STRIDE - 1) // COARSE_STRIDE
    with open(out / "matches.jsonl", "w") as f:
        for ia, ib, conf in coarse:
            xa, ya = cell_center(ia, grid_wa, COARSE_STRIDE)
            xb, yb = cell_center(ib, grid_w, COARSE_STRIDE)
            f.write(json.dumps(
                {"xa": xa, "ya": ya, "xb": xb, "yb": yb,
                 "conf": round(conf, 6), "level": "coarse"},
                sort_keys=True) + "\n")
        for k in range(len(fine)):
            f.write(json.dumps(
                {"xa": round(float(fine.xa[k]), 4), "ya": round(float(fine.ya[k]), 4),
                 "xb": round(float(fine.xb[k]), 4), "yb": round(float(fine.yb[k]), 4),
                 "conf": round(float(fine.confidence[k]), 6), "level": "fine"},
                sort_keys=True) + "\n")
    if overlay:
        _draw_overlay(img_a, img_b, fine, out / "overlay.png")
    _log_line(out, f"match took {time.monotonic() - t0:.2f}s, {len(fine)} fine matches")
    if len(fine) == 0:
        click.echo("no matches", err=True)
        sys.exit(2)
    click.echo(f"{len(coarse)} coarse / {len(fine)} fine matches")


# ---------------------------------------------------------------------------
# evaluation (shared worker machinery)

_WORKER: dict = {}


def _init_worker(checkpoint: str, prompt_mode: str, ransac_px: float, overlay_dir: str | None):
    import torch

    torch.set_num_threads(1)
    model, cfg = load_checkpoint(Path(checkpoint))
    _WORKER.update(
        model=model, cfg=cfg, prompt_mode=prompt_mode,
        ransac_px=ransac_px, overlay_dir=overlay_dir,
    )


def _eval_one(arg: tuple) -> dict:
    root, rec_dict, kind, pair_id = arg
    rec = PairRecord(root=Path(root), **rec_dict)
    model, cfg = _WORKER["model"], _WORKER["cfg"]
    img_a, img_b = rec.load_images()
    _, fine = match_pair(model, img_a, img_b, cfg, prompt_mode=_WORKER["prompt_mode"])
    row: dict = {"pair": rec.a, "n_matches": len(fine)}

    if kind == "imim":
        mp = rec.load_masks()
        rep = imim_score(fine, mp)
        row.update(rep.to_dict())
        if _WORKER["overlay_dir"]:
            from .evalsuite import _in_mask

            ok = _in_mask(mp.source_mask, fine.xa, fine.ya) & _in_mask(
                mp.target_mask, fine.xb, fine.yb
            )
            _draw_overlay(img_a, img_b, fine,
                          Path(_WORKER["overlay_dir"]) / f"{pair_id:05d}.png", consistent=ok)
    elif kind == "pose":
        frame_a, frame_b = rec.load_frames()
        R_gt = frame_b.R @ frame_a.R.T
        t_gt = frame_b.t - R_gt @ frame_a.t
        try:
            R, t, inl = estimate_pose(
                fine, frame_a.K, frame_b.K, ransac_px=_WORKER["ransac_px"], seed=cfg.seed
            )
            row["error_deg"] = round(pose_error(R, t, R_gt, t_gt), 6)
            row["n_inliers"] = int(inl.sum())
            row["failed"] = False
        except EstimationError as e:
            row.update(error_deg=None, n_inliers=0, failed=True, reason=str(e))
    elif kind == "homography":
        h_gt = rec.load_homography()
        try:
            H, inl = estimate_homography(fine, ransac_px=_WORKER["ransac_px"], seed=cfg.seed)
            row["error_px"] = round(
                corner_error(H, h_gt, (img_a.height, img_a.width)), 6
            )
            row["n_inliers"] = int(inl.sum())
            row["failed"] = False
        except EstimationError as e:
            row.update(error_px=None, n_inliers=0, failed=True, reason=str(e))
    else:
        raise ValueError(f"unknown eval kind {kind}")
    return row


def _run_eval(records, kind, checkpoint, prompt_mode, ransac_px, jobs, overlay_dir=None):
    args = [
        (str(r.root), r.to_dict(), kind, i) for i, r in enumerate(records)
    ]
    if jobs <= 1:
        _init_worker(str(checkpoint), prompt_mode, ransac_px, overlay_dir)
        return [_eval_one(a) for a in args]
    with ProcessPoolExecutor(
        max_workers=jobs, initializer=_init_worker,
        initargs=(str(checkpoint), prompt_mode, ransac_px, overlay_dir),
    ) as ex:
        # map() preserves submission order, keeping reports deterministic.
        return list(ex.map(_eval_one, args, chunksize=4))


def _eval_command_options(fn):
    fn = click.option("--jobs", type=int, default=1, show_default=True)(fn)
    fn = click.option("--split", default=None, help="restrict to one split")(fn)
    fn = click.option("--prompt-mode", type=click.Choice(PROMPT_MODES), default=None)(fn)
    fn = click.option("--out", type=click.Path(), required=True, help="output directory")(fn)
    fn = click.option("--data", type=click.Path(exists=True), required=True)(fn)
    fn = click.option("--checkpoint", type=click.Path(exists=True), required=True)(fn)
    return fn


def _select_records(data, split, kind):
    records = [r for r in load_dataset(Path(data)) if r.kind == kind]
    if split:
        records = [r for r in records if r.split == split]
    if not records:
        raise click.UsageError(f"no {kind!r} records in {data} (split={split})")
    return records


@main.command("eval-imim")
@_eval_command_options
@click.option("--overlays/--no-overlays", default=False, show_default=True)
def eval_imim(checkpoint, data, out, prompt_mode, split, jobs, overlays):
    """Instance-consistency score over a multi-instance dataset."""
    records = _select_records(data, split, "mask")
    out = Path(out)
    t0 = time.monotonic()
    rows = _run_eval(records, "imim", checkpoint, prompt_mode or DEFAULT_PROMPT_MODE,
                     0.0, jobs, overlay_dir=str(out / "overlays") if overlays else None)
    reports = [
        ImimReport(r["value"], r["n_source"], r["n_consistent"], r["valid"]) for r in rows
    ]
    payload = {"per_pair": rows, "aggregate": aggregate_imim(reports)}
    _write_json(out / "imim.json", payload)
    _log_line(out, f"eval-imim {len(rows)} pairs took {time.monotonic() - t0:.1f}s")
    click.echo(json.dumps(payload["aggregate"], sort_keys=True))


@main.command("eval-pose")
@_eval_command_options
@click.option("--ransac-px", type=float, default=0.5, show_default=True)
def eval_pose(checkpoint, data, out, prompt_mode, split, jobs, ransac_px):
    """Relative pose AUC over a posed dataset."""
    records = _select_records(data, split, "pose")
    out = Path(out)
    t0 = time.monotonic()
    rows = _run_eval(records, "pose", checkpoint, prompt_mode or DEFAULT_PROMPT_MODE,
                     ransac_px, jobs)
    errors = [r["error_deg"] if not r["failed"] else np.inf for r in rows]
    aggregate = {f"auc@{t:g}deg": round(auc(errors, t), 6) for t in POSE_THRESHOLDS_DEG}
    aggregate["n_failed"] = sum(r["failed"] for r in rows)
    payload = {"per_pair": rows, "aggregate": aggregate}
    _write_json(out / "pose.json", payload)
    _log_line(out, f"eval-pose {len(rows)} pairs took {time.monotonic() - t0:.1f}s")
    click.echo(json.dumps(aggregate, sort_keys=True))


@main.command("eval-homography")
@_eval_command_options
@click.option("--ransac-px", type=float, default=3.0, show_default=True)
def eval_homography(checkpoint, data, out, prompt_mode, split, jobs, ransac_px):
    """Homography corner-error AUC over a warp dataset."""
    records = _select_records(data, split, "h")
    out = Path(out)
    t0 = time.monotonic()
    rows = _run_eval(records, "homography", checkpoint, prompt_mode or DEFAULT_PROMPT_MODE,
                     ransac_px, jobs)
    errors = [r["error_px"] if not r["failed"] else np.inf for r in rows]
    aggregate = {f"auc@{t:g}px": round(auc(errors, t), 6) for t in HOMOGRAPHY_THRESHOLDS_PX}
    aggregate["n_failed"] = sum(r["failed"] for r in rows)
    payload = {"per_pair": rows, "aggregate": aggregate}
    _write_json(out / "homography.json", payload)
    _log_line(out, f"eval-homography {len(rows)} pairs took {time.monotonic() - t0:.1f}s")
    click.echo(json.dumps(aggregate, sort_keys=True))


# ---------------------------------------------------------------------------
# ablate


@main.command("ablate")
@click.option("--data", type=click.Path(exists=True), required=True,
              help="training index.json (homography or pose supervision)")
@click.option("--eval-data", type=click.Path(exists=True), required=True,
              help="multi-instance index.json for IMIM scoring")
@click.option("--out", type=click.Path(), required=True)
@click.option("--axes", "axes", multiple=True,
              type=click.Choice(["prompt-mode", "timestep"]), required=True)
@click.option("--steps", type=int, default=300, show_default=True,
              help="identical training budget per cell")
@click.option("--timesteps", default="0,100", show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
def cmd_ablate(data, eval_data, out, axes, steps, timesteps, config_path, seed):
    """Cross-product sweep over the chosen axes; markdown + JSON reports."""
    cfg0, raw = _load_config(config_path, seed=seed)
    modes = list(PROMPT_MODES) if "prompt-mode" in axes else [
        raw.get("prompt_mode", DEFAULT_PROMPT_MODE)
    ]
    tsteps = (
        [int(s) for s in timesteps.split(",")] if "timestep" in axes else [cfg0.timestep]
    )
    train_records = [r for r in load_dataset(Path(data)) if r.split == "train"]
    eval_records = [r for r in load_dataset(Path(eval_data)) if r.kind == "mask"]
    if not eval_records:
        raise click.UsageError(f"no mask records in {eval_data}")

    out = Path(out)
    rows = []
    t0 = time.monotonic()
    for mode in modes:
        for t in tsteps:
            cfg = MatchingConfig.from_dict({**cfg0.to_dict(), "timestep": t})
            ck = out / f"cell_{mode}_t{t}"
            train_model(train_records, cfg, steps=steps, prompt_mode=mode, out_dir=ck)
            cell_rows = _run_eval(eval_records, "imim", ck / "final", mode, 0.0, 1)
            reports = [
                ImimReport(r["value"], r["n_source"], r["n_consistent"], r["valid"])
                for r in cell_rows
            ]
            agg = aggregate_imim(reports)
            rows.append({
                "prompt_mode": mode, "timestep": t, "steps": steps,
                "imim": round(agg["mean_of_ratios"], 4),
                "imim_pooled": round(agg["ratio_of_sums"], 4),
                "n_valid": agg["n_valid"],
            })
            _log_line(out, f"ablate cell mode={mode} t={t} done at {time.monotonic() - t0:.1f}s")

    _write_json(out / "ablation.json", {"axes": sorted(axes), "rows": rows})
    lines = [
        "| prompt_mode | timestep | steps | imim | imim_pooled | n_valid |",
        "|---|---|---|---|---|---|",
    ]
    for r in rows:
        lines.append(
            f"| {r['prompt_mode']} | {r['timestep']} | {r['steps']} "
            f"| {r['imim']:.2f} | {r['imim_pooled']:.2f} | {r['n_valid']} |"
        )
    (out / "ablation.md").write_text("\n".join(lines) + "\n")
    click.echo("\n".join(lines))


if __name__ == "__main__":
    main()
