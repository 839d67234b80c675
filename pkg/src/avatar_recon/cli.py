"""Command-line driver: data generation, training, reconstruction, evaluation."""
from __future__ import annotations

import csv
import json
import logging
import sys
import warnings
from pathlib import Path

# flush-to-zero makes numpy's float info report a zero subnormal
warnings.filterwarnings("ignore", message="The value of the smallest subnormal")

import click  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from . import canonical, hypernet, metrics, plotting, refinement, synth
from .config import Config, config_template
from .encoder import NormalImage
from .geometry import Camera, Pose, SkinnedTemplate, bone_transforms, camera_pair, lbs_forward, query_skin_weights
from .meshing import TriMesh
from .training import LossLog, NonFiniteError

log = logging.getLogger("avatar_recon")

EXIT_BAD_INPUT, EXIT_NUMERIC, EXIT_IO = 2, 3, 4


class Ctx:
    def __init__(self, cfg: Config, out: Path):
        self.cfg = cfg
        self.out = out

    def path(self, name) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name


def _fail(code: int, msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def repose_mesh(mesh: TriMesh, template: SkinnedTemplate, pose: Pose) -> TriMesh:
    """Warp a canonical mesh of any topology with nearest-template skin weights."""
    w = query_skin_weights(mesh.vertices, template)
    B = bone_transforms(template.skeleton, pose)
    return TriMesh(lbs_forward(mesh.vertices, w, B), mesh.faces.copy())


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON config file.")
@click.option("--seed", type=click.IntRange(0, 2 ** 64 - 1), default=None, help="Overrides the config seed.")
@click.option("--threads", type=click.IntRange(1), default=1, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default="out", show_default=True)
@click.option("--verbose", is_flag=True)
@click.pass_context
def main(ctx, config_path, seed, threads, out, verbose):
    """Clothed body reconstruction from front/back normal maps."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(threads)
    torch.set_flush_denormal(True)
    try:
        cfg = Config.load(config_path) if config_path else Config()
    except OSError as e:
        _fail(EXIT_IO, f"cannot read config: {e}")
    except (ValueError, TypeError) as e:
        _fail(EXIT_BAD_INPUT, f"bad config: {e}")
    if seed is not None:
        cfg.seed = seed
    # torch seeds only matter for ops we do not seed explicitly
    torch.manual_seed(cfg.seed % 2 ** 63)
    ctx.obj = Ctx(cfg, Path(out))


def run():
    """Entry point mapping module errors onto exit codes."""
    try:
        main(standalone_mode=False)
    except click.exceptions.Abort:
        _fail(1, "aborted")
    except click.ClickException as e:
        e.show()
        sys.exit(EXIT_BAD_INPUT)
    except (NonFiniteError, FloatingPointError) as e:
        _fail(EXIT_NUMERIC, str(e))
    except (FileNotFoundError, PermissionError, IsADirectoryError) as e:
        _fail(EXIT_IO, str(e))
    except OSError as e:
        _fail(EXIT_IO, str(e))
    except (ValueError, KeyError, IndexError, TypeError) as e:
        _fail(EXIT_BAD_INPUT, str(e) or type(e).__name__)


@main.command("config-template")
@click.pass_obj
def config_template_cmd(c: Ctx):
    """Write the default config annotated with reference values."""
    p = c.path("config.json")
    p.write_text(json.dumps(config_template(c.cfg), indent=2))
    click.echo(str(p))


@main.command("gen-data")
@click.pass_obj
def gen_data(c: Ctx):
    """Synthetic subjects, poses and normal-map renders under OUT."""
    d = c.cfg.data
    manifest = synth.generate_dataset(c.out, d.n_subjects, d.n_poses, c.cfg.seed, d.resolution, d.image_size,
                                      d.amplitude, d.noise_sigma, d.extent)
    first = manifest["subjects"][0]
    sdir = c.out / first["name"] / "renders"
    imgs = [NormalImage.load_png(sdir / f"{first['poses'][0]}_{s}.png", s) for s in ("front", "back")]
    plotting.normal_pair(imgs, c.path("preview_normals.png"))
    _write_csv(c.path("subjects.csv"), ["name", "body_seed", "cloth_seed", "pose_seed", "n_poses"],
               [[s["name"], s["body_seed"], s["cloth_seed"], s["pose_seed"], len(s["poses"])]
                for s in manifest["subjects"]])
    click.echo(f"{len(manifest['subjects'])} subjects written to {c.out}")


def _progress(every=100):
    def cb(step, params, lg):
        if step % every == every - 1:
            log.info("step %d loss %.5f", step + 1, float(np.mean(lg.totals()[-every:])))
    return cb


@main.command("train-canonical")
@click.argument("dataset", type=click.Path(exists=True, file_okay=False))
@click.option("--steps", type=click.IntRange(1), default=None, help="Overrides canonical.steps.")
@click.pass_obj
def train_canonical(c: Ctx, dataset, steps):
    """Fit the canonical network and encoder on every non-held-out view."""
    cc = c.cfg.canonical
    if steps is not None:
        cc.steps = steps
    views = canonical.load_views(dataset, exclude_poses=tuple(cc.holdout_poses))
    if not views:
        raise ValueError("no training views left after holdout")
    model, lg = canonical.train_canonical(views, cc, seed=c.cfg.seed, callback=_progress())
    model.save(c.path("canonical.carw"), {"seed": c.cfg.seed, "steps": cc.steps, "n_views": len(views)})
    lg.write_csv(c.path("canonical_log.csv"))
    plotting.loss_curves({"canonical": lg}, c.path("canonical_loss.png"))
    click.echo(f"canonical model written to {c.path('canonical.carw')}")


def template_meshes(dataset, holdout=(), n_subjects=None) -> list[TriMesh]:
    """Naked template of each subject warped into each of its non-held-out poses."""
    manifest = canonical.load_manifest(dataset)
    out = []
    for e in manifest["subjects"][:n_subjects]:
        sdir = Path(dataset) / e["name"]
        tpl = SkinnedTemplate.load(sdir / "template.obj", sdir / "template.json")
        naked = TriMesh(tpl.vertices, tpl.faces)
        for j, pname in enumerate(e["poses"]):
            if j in holdout:
                continue
            pose = Pose.from_json(json.loads((sdir / "poses" / f"{pname}.json").read_text()))
            out.append(synth.pose_mesh(naked, tpl, pose))
    return out


@main.command("train-hypernet")
@click.argument("dataset", type=click.Path(exists=True, file_okay=False))
@click.option("--steps", type=click.IntRange(1), default=None, help="Overrides hypernet.steps.")
@click.pass_obj
def train_hypernet(c: Ctx, dataset, steps):
    """Fit the hyper-network on posed naked templates."""
    hc = c.cfg.hypernet
    if steps is not None:
        hc.steps = steps
    meshes = template_meshes(dataset, tuple(c.cfg.canonical.holdout_poses), hc.n_templates)
    phi, spec, lg = hypernet.train_hypernet(meshes, hc, seed=c.cfg.seed, callback=_progress())
    hypernet.save_hypernet(c.path("hypernet.carw"), phi, spec, {"seed": c.cfg.seed, "steps": hc.steps})
    lg.write_csv(c.path("hypernet_log.csv"))
    plotting.loss_curves({"hypernet": lg}, c.path("hypernet_loss.png"))
    click.echo(f"hyper-network written to {c.path('hypernet.carw')}")


def _load_view(dataset, subject, pose, front, back, template, pose_json):
    """(View, back image, cameras, gt canonical or None)."""
    if dataset is not None:
        if front or back or template or pose_json:
            raise click.UsageError("give either --dataset or explicit input files, not both")
        manifest = canonical.load_manifest(dataset)
        view = canonical.load_view(dataset, subject, pose)
        sname = manifest["subjects"][subject]["name"]
        bimg = NormalImage.load_png(Path(dataset) / sname / "renders" / f"pose_{pose:03d}_back.png", "back")
        cams = (Camera.from_json(manifest["cameras"]["front"]), Camera.from_json(manifest["cameras"]["back"]))
        return view, bimg, cams, view.gt_mesh
    if not all((front, back, template, pose_json)):
        raise click.UsageError("need --front, --back, --template and --pose-json (or --dataset)")
    fimg, bimg = NormalImage.load_png(front, "front"), NormalImage.load_png(back, "back")
    if fimg.shape != bimg.shape or fimg.shape[0] != fimg.shape[1]:
        raise ValueError("front and back images must be square and of equal size")
    cams = camera_pair(fimg.shape[0])
    tpl = SkinnedTemplate.load(template, Path(template).with_suffix(".json"))
    p = Pose.from_json(json.loads(Path(pose_json).read_text()))
    return canonical.View(tpl, p, fimg, cams[0], None, Path(front).stem), bimg, cams, None


@main.command()
@click.option("--dataset", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--subject", type=click.IntRange(0), default=0, show_default=True)
@click.option("--pose", type=click.IntRange(0), default=0, show_default=True)
@click.option("--front", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--back", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--template", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Template OBJ; skinning JSON is read from the same stem.")
@click.option("--pose-json", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--canonical", "canonical_ckpt", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--hypernet", "hypernet_ckpt", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Initialise refinement from the hyper-network instead of a sphere.")
@click.option("--iters", type=click.IntRange(0), default=None, help="Overrides refine.max_iters.")
@click.pass_obj
def reconstruct(c: Ctx, dataset, subject, pose, front, back, template, pose_json, canonical_ckpt, hypernet_ckpt, iters):
    """Canonical mesh, its reposed warp, and the normal-refined posed mesh."""
    rc = c.cfg.refine
    if iters is not None:
        rc.max_iters = iters
    view, bimg, cams, gt = _load_view(dataset, subject, pose, front, back, template, pose_json)
    model = canonical.CanonicalModel.load(canonical_ckpt)
    can = canonical.reconstruct_canonical(model, view, c.cfg.canonical.mesh_resolution)
    can.save_obj(c.path("canonical.obj"))
    posed = repose_mesh(can, view.template, view.pose)
    posed.save_obj(c.path("posed.obj"))

    targets = refinement.NormalTargets((view.image, bimg), cams)
    spec = hypernet.g_spec_for(c.cfg.hypernet.g_hidden)
    if hypernet_ckpt:
        phi, hspec = hypernet.load_hypernet(hypernet_ckpt)
        naked = synth.pose_mesh(TriMesh(view.template.vertices, view.template.faces), view.template, view.pose)
        init = refinement.initial_params("hypernet", hspec.g_spec, rc, c.cfg.seed, hyper=(phi, hspec),
                                         template_mesh=naked)
    else:
        init = refinement.initial_params("geometric", spec, rc, c.cfg.seed)
    meshes = {"canonical": can, "posed": posed}
    if rc.max_iters > 0:
        res = refinement.refine(init, targets, rc, seed=c.cfg.seed, anchor=posed, callback=_progress())
        res.mesh.save_obj(c.path("refined.obj"))
        res.log.write_csv(c.path("refine_log.csv"))
        plotting.loss_curves({"refine": res.log}, c.path("refine_loss.png"))
        meshes["refined"] = res.mesh
    else:
        posed.save_obj(c.path("refined.obj"))
    plotting.normal_pair((view.image, bimg), c.path("input_normals.png"))
    plotting.mesh_views(meshes, c.path("meshes.png"))
    if gt is not None:
        gt_posed = synth.pose_mesh(gt, view.template, view.pose)
        rows = []
        for name, m in meshes.items():
            ref = gt if name == "canonical" else gt_posed
            r = metrics.report(m, ref, c.cfg.eval_samples, c.cfg.seed)
            rows.append({"name": name, **r})
        keys = ["chamfer", "p2s", "normal"]
        _write_csv(c.path("metrics.csv"), ["mesh", *keys], [[r["name"], *(repr(r[k]) for k in keys)] for r in rows])
        plotting.metric_bars(rows, keys, c.path("metrics.png"))
    click.echo(f"meshes written to {c.out}")


@main.command()
@click.argument("pred", type=click.Path(exists=True, dir_okay=False))
@click.argument("gt", type=click.Path(exists=True, dir_okay=False))
@click.option("--samples", type=click.IntRange(1), default=None, help="Overrides eval_samples.")
@click.pass_obj
def evaluate(c: Ctx, pred, gt, samples):
    """Print a JSON metric report of PRED against GT."""
    a, b = TriMesh.load_obj(pred), TriMesh.load_obj(gt)
    for path, m in ((pred, a), (gt, b)):
        if m.is_empty:
            raise ValueError(f"{path}: no faces")
    r = metrics.report(a, b, samples or c.cfg.eval_samples, c.cfg.seed)
    text = json.dumps(r, indent=2, sort_keys=True)
    c.path("metrics.json").write_text(text + "\n")
    click.echo(text)


@main.command()
@click.argument("mesh", type=click.Path(exists=True, dir_okay=False))
@click.argument("template", type=click.Path(exists=True, dir_okay=False))
@click.argument("pose_json", type=click.Path(exists=True, dir_okay=False))
@click.option("--name", default="reposed.obj", show_default=True)
@click.pass_obj
def repose(c: Ctx, mesh, template, pose_json, name):
    """Warp a canonical MESH into the pose in POSE_JSON using TEMPLATE's skinning."""
    tpl = SkinnedTemplate.load(template, Path(template).with_suffix(".json"))
    p = Pose.from_json(json.loads(Path(pose_json).read_text()))
    out = repose_mesh(TriMesh.load_obj(mesh), tpl, p)
    out.save_obj(c.path(name))
    click.echo(str(c.path(name)))


@main.command()
@click.argument("logs", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--smooth", type=click.IntRange(1), default=25, show_default=True)
@click.pass_obj
def report(c: Ctx, logs, smooth):
    """Loss-curve figure and a summary CSV for one or more training logs."""
    named = {Path(p).stem: LossLog.read_csv(p) for p in logs}
    rows = []
    for name, lg in named.items():
        t = lg.totals()
        if not len(t):
            raise ValueError(f"{name}: empty log")
        k = min(smooth, len(t))
        rows.append([name, len(t), repr(float(t[:k].mean())), repr(float(t[-k:].mean())), repr(float(t.min()))])
    _write_csv(c.path("summary.csv"), ["log", "steps", "first_mean", "last_mean", "min"], rows)
    plotting.loss_curves(named, c.path("losses.png"), smooth)
    click.echo(str(c.path("summary.csv")))


if __name__ == "__main__":
    run()
