"""Stage orchestration for one run directory.

Layout of a run directory::

    config.json                resolved configuration
    corpus/                    VGRD pairs, VFEA view features, manifest.json
    vq_stage1.ckpt             stage checkpoints (model, optimizer, rng, step)
    vq_stage2.ckpt
    bridge.ckpt
    logs/<stage>.jsonl         append-only per-step records
    summaries/<stage>.json     end-of-stage numbers used by reports
    completions/<id>.vgrd      sampled completions
    report.json, baseline.json, report.csv, figures/*.png
    meshes/<id>.obj

Every VGRD file gets a ``.meta.json`` sidecar and every CKPT file a
``meta/fingerprint`` tensor holding the config fingerprint.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import bridge as B
from . import config as C
from . import denoiser as Dn
from . import grid
from . import metrics as M
from . import tensor as T
from . import views as V
from . import vqvae as VQ
from .geometry import marching_cubes, write_obj

log = logging.getLogger(__name__)

STAGES = ("vq_stage1", "vq_stage2", "bridge")


class StageOrderError(RuntimeError):
    """A stage was invoked before the stages it depends on finished."""


class FingerprintError(RuntimeError):
    """An artifact was produced under a different training configuration."""


class LockedError(RuntimeError):
    """Another process holds the run directory."""


# ---------------------------------------------------------------------------
# fingerprints


def _fp_tensor(fp: str) -> torch.Tensor:
    return torch.tensor(list(bytes.fromhex(fp)), dtype=torch.float32)


def _fp_of_tensor(t: torch.Tensor) -> str:
    return bytes(int(v) for v in t.tolist()).hex()


def write_meta(path: Path, fp: str) -> None:
    Path(str(path) + ".meta.json").write_text(json.dumps({"fingerprint": fp}, sort_keys=True) + "\n")


def check_meta(path: Path, fp: str, force: bool = False) -> None:
    meta = Path(str(path) + ".meta.json")
    found = json.loads(meta.read_text())["fingerprint"] if meta.exists() else None
    if found != fp and not force:
        raise FingerprintError(f"{path}: fingerprint {found} does not match config {fp[:12]}...")


def check_ckpt(tensors: dict, path: Path, fp: str, force: bool = False) -> None:
    found = _fp_of_tensor(tensors["meta/fingerprint"]) if "meta/fingerprint" in tensors else None
    if found != fp and not force:
        raise FingerprintError(f"{path}: checkpoint fingerprint {found} does not match config {fp[:12]}...")


# ---------------------------------------------------------------------------
# run directory


@dataclass
class Run:
    root: Path
    cfg: dict
    force: bool = False

    @property
    def fp(self) -> str:
        return C.fingerprint(self.cfg)

    @property
    def corpus(self) -> Path:
        return self.root / "corpus"

    @property
    def manifest(self) -> Path:
        return self.corpus / "manifest.json"

    def ckpt(self, stage: str) -> Path:
        return self.root / f"{stage}.ckpt"

    def log_path(self, stage: str) -> Path:
        return self.root / "logs" / f"{stage}.jsonl"

    def summary_path(self, stage: str) -> Path:
        return self.root / "summaries" / f"{stage}.json"

    def summary(self, stage: str) -> dict:
        return json.loads(self.summary_path(stage).read_text())

    def stage_done(self, stage: str) -> bool:
        return self.summary_path(stage).exists()

    def load_stage(self, stage: str) -> dict:
        path = self.ckpt(stage)
        if not self.stage_done(stage) or not path.exists():
            raise StageOrderError(f"stage {stage!r} has not been run in {self.root}")
        tensors = T.load_checkpoint(path)
        check_ckpt(tensors, path, self.fp, self.force)
        return tensors

    def log(self, stage: str, record: dict) -> None:
        path = self.log_path(stage)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def write_summary(self, stage: str, summary: dict) -> None:
        path = self.summary_path(stage)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({**summary, "fingerprint": self.fp}, indent=2, sort_keys=True) + "\n")


def open_run(root, config_path=None, overrides=(), force: bool = False, create: bool = False) -> Run:
    """Load (or with ``create`` initialise) a run directory and its config.

    Without an explicit ``config_path`` an existing run re-reads its own
    ``config.json``; overrides are applied on top either way.
    """
    root = Path(root)
    saved = root / "config.json"
    if config_path is None and saved.exists():
        config_path = saved
    cfg = C.load_config(config_path, overrides)
    if create:
        root.mkdir(parents=True, exist_ok=True)
        saved.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    elif not saved.exists():
        raise StageOrderError(f"{root} is not a run directory; run 'gen' first")
    return Run(root, cfg, force)


@contextmanager
def run_lock(root: Path):
    """Exclusive per-run lock; a lock left by a dead process is taken over."""
    root.mkdir(parents=True, exist_ok=True)
    path = root / ".lock"
    for _ in range(2):
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                pid = int(path.read_text().strip() or 0)
                os.kill(pid, 0)
            except (ValueError, ProcessLookupError):
                path.unlink(missing_ok=True)
                continue
            except PermissionError:
                pass
            raise LockedError(f"{root} is locked by process {path.read_text().strip()}")
    else:
        raise LockedError(f"could not lock {root}")
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        path.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# gen


def generate(run: Run) -> Path:
    g = run.cfg["grid"]
    dims = (g["dims"],) * 3
    manifest = grid.make_corpus(run.cfg["seed"], g["n_pairs"], dims, g["truncation"], run.corpus,
                                g["n_cameras"], g["keep_fraction_bound"])
    extractor = V.PatchDescriptor(run.cfg["views"]["patch"])
    for e in json.loads(manifest.read_text()):
        for key in ("partial_path", "complete_path"):
            write_meta(run.corpus / e[key], run.fp)
        complete = grid.load_grid(run.corpus / e["complete_path"])
        for view in run.cfg["vqvae"]["views"]:
            V.save_features(extractor(V.render_depth(complete, view)), run.corpus / f"{e['id']}_{view}.vfea")
    write_meta(manifest, run.fp)
    return manifest


@dataclass
class Corpus:
    ids: list
    pairs: list
    x: torch.Tensor       # complete UDF grids (N, 1, D, D, D)
    xp: torch.Tensor      # partial SDF grids
    feats: torch.Tensor   # mean view features of the complete grids


def load_corpus(run: Run) -> Corpus:
    if not run.manifest.exists():
        raise StageOrderError("no corpus found; run 'gen' first")
    check_meta(run.manifest, run.fp, run.force)
    entries = json.loads(run.manifest.read_text())
    for e in entries:
        for key in ("partial_path", "complete_path"):
            check_meta(run.corpus / e[key], run.fp, run.force)
    pairs = grid.load_manifest(run.manifest)
    views = run.cfg["vqvae"]["views"]
    feats = [V.shape_features(p.complete, views, V.FileFeatures(run.corpus, p.id)).values for p in pairs]
    return Corpus([p.id for p in pairs], pairs, VQ.grid_tensor([p.complete for p in pairs]),
                  VQ.grid_tensor([p.partial for p in pairs]),
                  torch.from_numpy(np.stack(feats)).to(torch.get_default_dtype()))


# ---------------------------------------------------------------------------
# training loops


def _train_state(opt, names, gen, step: int, done: bool) -> dict:
    out = T.optimizer_tensors(opt, names, "opt/")
    out["train/step"] = torch.tensor([float(step)])
    out["train/done"] = torch.tensor([1.0 if done else 0.0])
    out["train/rng"] = T.rng_tensor(gen)
    return out


def _resume(run: Run, stage: str, opt, names, gen, load_model) -> int:
    """Restore an interrupted stage; returns the step to continue from."""
    path = run.ckpt(stage)
    if not path.exists():
        return 0
    tensors = T.load_checkpoint(path)
    check_ckpt(tensors, path, run.fp, run.force)
    load_model(tensors)
    T.load_optimizer_tensors(opt, names, "opt/", tensors)
    T.restore_rng(gen, tensors["train/rng"])
    step = int(tensors["train/step"][0])
    run.log(stage, {"event": "resume", "step": step})
    return step


def _loop(run: Run, stage: str, n_steps: int, step_fn, save, start: int, until: int | None) -> bool:
    """Run steps ``start..n_steps`` with periodic checkpoints; False when stopped early."""
    every = run.cfg["train"]["checkpoint_every"]
    stop = n_steps if until is None else min(until, n_steps)
    t0 = time.perf_counter()
    for step in range(start, stop):
        rec = step_fn()
        run.log(stage, {"step": step + 1, **rec, "wall": round(time.perf_counter() - t0, 3),
                        "seed": run.cfg["seed"]})
        if (step + 1) % every == 0 and step + 1 < n_steps:
            save(step + 1, False)
    finished = stop == n_steps
    save(stop, finished)
    return finished


def train_vqvae(run: Run, stage: int, until: int | None = None) -> dict | None:
    """Train VQ-VAE stage 1 or 2 (resumable). Returns the summary once finished."""
    name = f"vq_stage{stage}"
    if run.stage_done(name):
        log.info("%s already finished", name)
        return run.summary(name)
    corpus = load_corpus(run)
    torch.manual_seed(run.cfg["seed"])
    model = VQ.VQVAE(C.vq_config(run.cfg))
    if stage == 2:
        model.load_checkpoint_tensors(run.load_stage("vq_stage1"))
    tc = run.cfg["train"]
    gen = torch.Generator().manual_seed(run.cfg["seed"] * 1000 + stage)
    opt = T.make_optimizer(VQ.vq_parameters(model, stage), "adam", lr=tc[f"vq_stage{stage}_lr"])
    names = model.param_names()
    start = _resume(run, name, opt, names, gen, model.load_checkpoint_tensors)
    n = len(corpus.ids)

    def step_fn():
        idx = torch.randint(0, n, (tc["vq_batch"],), generator=gen)
        feats = corpus.feats[idx] if stage == 2 else None
        rec = VQ.vq_training_step(model, corpus.x[idx], feats, stage, opt, gen)
        return {k: rec[k] for k in ("total", "reconstruction", "codebook", "commitment", "reseeded")}

    def save(step, done):
        if done:
            model.stage.fill_(stage)
        tensors = {**model.checkpoint_tensors(), **_train_state(opt, names, gen, step, done),
                   "meta/fingerprint": _fp_tensor(run.fp)}
        T.save_checkpoint(run.ckpt(name), tensors)

    if not _loop(run, name, tc[f"vq_stage{stage}_steps"], step_fn, save, start, until):
        return None
    fusion = stage == 2
    summary = {"steps": tc[f"vq_stage{stage}_steps"],
               "recon_l1": VQ.reconstruction_l1(model, corpus.x, corpus.feats if fusion else None, fusion)}
    run.write_summary(name, summary)
    return summary


def _vq_for_bridge(run: Run) -> tuple[VQ.VQVAE, str]:
    fusion = run.cfg["vqvae"]["fusion"]["enabled"]
    source = "vq_stage2" if fusion else "vq_stage1"
    model = VQ.VQVAE(C.vq_config(run.cfg))
    model.load_checkpoint_tensors(run.load_stage(source))
    return model, source


def _bridge_names(net, vq) -> dict:
    names = {id(p): f"den/{k}" for k, p in net.named_parameters()}
    names.update({id(p): f"e_p/{k}" for k, p in vq.e_p.named_parameters()})
    return names


@torch.no_grad()
def eval_eps_loss(run: Run, net, vq, corpus: Corpus, sched, repeats: int = 8) -> float:
    """Mean ε-loss over the corpus under a fixed evaluation seed."""
    net.eval()
    vq.eval()
    gen = torch.Generator().manual_seed(run.cfg["seed"] + 12345)
    noise = run.cfg["bridge"]["noise_scale"]
    losses = [float(Dn.bridge_loss(net, vq, corpus.x, corpus.feats, corpus.xp, sched, gen, noise))
              for _ in range(repeats)]
    net.train()
    return float(np.mean(losses))


def train_bridge(run: Run, until: int | None = None) -> dict | None:
    if run.stage_done("bridge"):
        log.info("bridge already finished")
        return run.summary("bridge")
    vq, source = _vq_for_bridge(run)
    corpus = load_corpus(run)
    torch.manual_seed(run.cfg["seed"])
    net = Dn.UNet3d(C.denoiser_config(run.cfg))
    sched = C.schedule(run.cfg)
    Dn.freeze_vq(vq)
    tc = run.cfg["train"]
    gen = torch.Generator().manual_seed(run.cfg["seed"] * 1000 + 3)
    params = list(net.parameters()) + list(vq.e_p.parameters())
    opt = T.make_optimizer(params, "adamw", lr=tc["bridge_lr"], weight_decay=tc["bridge_weight_decay"])
    names = _bridge_names(net, vq)

    initial_path = run.root / "summaries" / "bridge_initial.json"
    if not initial_path.exists():
        initial_path.parent.mkdir(parents=True, exist_ok=True)
        initial_path.write_text(json.dumps({"eps_loss": eval_eps_loss(run, net, vq, corpus, sched)}) + "\n")
    initial = json.loads(initial_path.read_text())["eps_loss"]

    def load_model(tensors):
        T.load_module_tensors(net, "den/", tensors)
        vq.load_checkpoint_tensors(tensors)

    start = _resume(run, "bridge", opt, names, gen, load_model)
    n = len(corpus.ids)
    noise = run.cfg["bridge"]["noise_scale"]

    def step_fn():
        idx = torch.randint(0, n, (tc["bridge_batch"],), generator=gen)
        return Dn.train_bridge_step(net, vq, (corpus.x[idx], corpus.feats[idx], corpus.xp[idx]),
                                    sched, opt, gen, noise)

    def save(step, done):
        tensors = {**T.module_tensors(net, "den/"), **vq.checkpoint_tensors(),
                   **_train_state(opt, names, gen, step, done), "meta/fingerprint": _fp_tensor(run.fp)}
        T.save_checkpoint(run.ckpt("bridge"), tensors)

    if not _loop(run, "bridge", tc["bridge_steps"], step_fn, save, start, until):
        return None
    final = eval_eps_loss(run, net, vq, corpus, sched)
    summary = {"steps": tc["bridge_steps"], "vq_source": source, "initial_eps_loss": initial,
               "final_eps_loss": final, "eps_ratio": final / initial}
    run.write_summary("bridge", summary)
    return summary


# ---------------------------------------------------------------------------
# inference


@dataclass
class Completer:
    """Trained bridge bundle: partial SDF grid -> completed UDF grid."""
    vq: VQ.VQVAE
    net: Dn.UNet3d
    sched: B.BridgeSchedule
    n_steps: int
    noise_scale: float
    deterministic: bool

    @torch.no_grad()
    def __call__(self, partial: grid.VoxelGrid, seed: int) -> grid.VoxelGrid:
        gen = torch.Generator().manual_seed(seed)
        zT = B.inject_stochasticity(VQ.encode_partial(self.vq, partial), self.noise_scale, gen)

        def eps(z, t):
            return self.net(z, torch.full((z.shape[0],), t))

        z0 = B.sample_completion(eps, zT, self.n_steps, self.sched, gen, self.deterministic)
        return VQ.decode(self.vq, self.vq.quantize(z0).quantized)


def load_completer(run: Run, n_steps: int | None = None, deterministic: bool | None = None) -> Completer:
    tensors = run.load_stage("bridge")
    vq = VQ.VQVAE(C.vq_config(run.cfg))
    vq.load_checkpoint_tensors(tensors)
    net = Dn.UNet3d(C.denoiser_config(run.cfg))
    T.load_module_tensors(net, "den/", tensors)
    vq.eval()
    net.eval()
    b = run.cfg["bridge"]
    return Completer(vq, net, C.schedule(run.cfg), n_steps or b["infer_steps"], b["noise_scale"],
                     b["deterministic"] if deterministic is None else deterministic)


def complete(run: Run, seed: int | None = None, deterministic: bool | None = None,
             inputs=None, out_dir=None) -> list[Path]:
    """Complete every corpus pair, or the given partial grid files, into ``out_dir``."""
    completer = load_completer(run, deterministic=deterministic)
    seed = run.cfg["seed"] if seed is None else seed
    out_dir = Path(out_dir) if out_dir else run.root / "completions"
    out_dir.mkdir(parents=True, exist_ok=True)
    if inputs:
        items = [(Path(p).name.removesuffix(".vgrd"), grid.load_grid(p)) for p in inputs]
    else:
        corpus = load_corpus(run)
        items = [(p.id, p.partial) for p in corpus.pairs]
    written = []
    for i, (key, partial) in enumerate(items):
        if partial.kind != grid.SDF:
            raise grid.GridFormatError(f"{key}: completion input must be an SDF partial scan")
        path = out_dir / f"{key}.vgrd"
        grid.save_grid(completer(partial, seed + i), path)
        write_meta(path, run.fp)
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# evaluation and export


def eval_config(run: Run) -> M.EvalConfig:
    m = run.cfg["metrics"]
    return M.EvalConfig(m["tau_mc"], m["tau_occ"], m["n_points"], m["f1_frac"], run.cfg["seed"])


def evaluate(run: Run, figures: bool = True) -> tuple[M.EvalReport, M.EvalReport]:
    """Score the trained bridge and the copy-partial baseline on the corpus."""
    completer = load_completer(run)
    corpus = load_corpus(run)
    cfg = eval_config(run)
    index = {p.id: i for i, p in enumerate(corpus.pairs)}
    extra = {"fingerprint": run.fp, "infer_steps": completer.n_steps,
             "deterministic": completer.deterministic, "method": "bridge"}
    preds = {}

    def complete_fn(pair):
        preds[pair.id] = completer(pair.partial, run.cfg["seed"] + index[pair.id])
        return preds[pair.id]

    report = M.evaluate_pairs(corpus.pairs, complete_fn, cfg, extra)
    baseline = M.evaluate_pairs(corpus.pairs, M.copy_partial, cfg, {"fingerprint": run.fp, "method": "copy_partial"})
    report.write(run.root / "report.json")
    baseline.write(run.root / "baseline.json")
    write_csv(run.root / "report.csv", report, baseline)
    if figures:
        from . import plotting

        fig_dir = run.root / "figures"
        fig_dir.mkdir(exist_ok=True)
        plotting.plot_losses({s: read_log(run, s) for s in STAGES if run.log_path(s).exists()},
                             fig_dir / "losses.png")
        plotting.plot_slices(corpus.pairs[:4], [preds[p.id] for p in corpus.pairs[:4]], fig_dir / "slices.png")
        plotting.plot_metric_bars(report, baseline, fig_dir / "metrics.png")
    return report, baseline


def write_csv(path: Path, report: M.EvalReport, baseline: M.EvalReport) -> None:
    keys = ("l1", "cd", "iou", "f1")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id", "method") + keys)
        for method, rep in (("bridge", report), ("copy_partial", baseline)):
            for row in rep.shapes:
                w.writerow([row["id"], method] + ["" if row[k] is None else repr(row[k]) for k in keys])
            w.writerow(["mean", method] + ["" if rep.means[k] is None else repr(rep.means[k]) for k in keys])


def read_log(run: Run, stage: str) -> list[dict]:
    """Per-step records; after a resume the latest record for each step wins."""
    by_step = {}
    for line in run.log_path(stage).read_text().splitlines():
        rec = json.loads(line)
        if "step" in rec and "event" not in rec:
            by_step[rec["step"]] = rec
    return [by_step[k] for k in sorted(by_step)]


def export_meshes(run: Run, inputs=None, out_dir=None) -> list[Path]:
    """Marching-cubes OBJ export of completions (default) or explicit grid files."""
    paths = [Path(p) for p in inputs] if inputs else sorted((run.root / "completions").glob("*.vgrd"))
    if not paths:
        raise StageOrderError("no completions to mesh; run 'complete' first")
    out_dir = Path(out_dir) if out_dir else run.root / "meshes"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for p in paths:
        if not inputs:
            check_meta(p, run.fp, run.force)
        g = grid.load_grid(p)
        iso = run.cfg["metrics"]["tau_mc"] if g.kind == grid.UDF else 0.0
        out = out_dir / (p.name.removesuffix(".vgrd") + ".obj")
        write_obj(marching_cubes(g, iso), out)
        written.append(out)
    return written
