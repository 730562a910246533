"""Single entry point orchestrating the full pipeline.

Subcommands: encrypt, decrypt, make-dataset, export-pairs, similarity,
train-embedder, train-attack, attack, score, report. Every run writes a
run_manifest.json (resolved parameters, library versions, input
fingerprints) beside its outputs so artifacts are reproducible. Keys are
always referenced by fingerprint; key bytes never reach logs or
manifests.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import hashlib
import json
import os
import platform
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .ciphers import SchemeConfig
from .errors import DataError, NumericError
from .rng import MasterKey, derive_epoch_key, read_key_file

DATA_ROOT_ENV = "CIPHERBREAK_DATA_ROOT"

DESK_LR = 2e-4
DESK_BASE = 16
DESK_BLOCKS = 1
DESK_TIME_DIM = 128
DESK_TIMESTEPS = 200


def _lazy_torch():
    import torch

    return torch


def _fingerprint_path(path: Path) -> str:
    path = Path(path)
    if path.is_file():
        return hashlib.sha256(path.read_bytes()).hexdigest()[:16]
    if path.is_dir():
        names = sorted(p.name for p in path.iterdir())
        digest = hashlib.sha256("\n".join(names).encode())
        return f"dir:{len(names)}:{digest.hexdigest()[:12]}"
    return "missing"


def _write_run_manifest(out_dir: Path, command: str, params: dict, inputs: dict) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch = _lazy_torch()
    payload = {
        "command": command,
        "params": params,
        "inputs": {k: _fingerprint_path(Path(v)) for k, v in inputs.items()},
        "versions": {
            "cipherbreak": __version__,
            "numpy": np.__version__,
            "torch": torch.__version__,
            "python": platform.python_version(),
        },
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_key(key_file, key_hex) -> MasterKey:
    if (key_file is None) == (key_hex is None):
        raise click.UsageError("provide exactly one of --key-file or --key-hex")
    if key_file is not None:
        try:
            return read_key_file(key_file)
        except (OSError, ValueError) as exc:
            raise DataError(str(exc)) from exc
    try:
        return MasterKey.from_hex(key_hex)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc


def _scheme_config(scheme: str, block: int | None, scramble_only: bool) -> SchemeConfig:
    try:
        return SchemeConfig(scheme, block, scramble_only)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc


def _load_embedder(spec_path):
    from .embedder import EmbedderSpec, build_embedder

    try:
        spec = EmbedderSpec.load(spec_path)
        return spec, build_embedder(spec)
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        raise DataError(f"cannot load embedder spec {spec_path}: {exc}") from exc


@click.group(name="cipherbreak")
@click.version_option(version=__version__, prog_name="cipherbreak")
@click.option("--threads", type=int, default=None, help="Cap torch/BLAS thread count.")
@click.option("--seed", "global_seed", type=int, default=0, show_default=True,
              help="Default seed for subcommands that take one.")
@click.pass_context
def cli(ctx, threads, global_seed):
    """Learnable image encryption schemes and a diffusion reconstruction attack."""
    ctx.ensure_object(dict)
    ctx.obj["seed"] = global_seed
    if threads is not None:
        _lazy_torch().set_num_threads(threads)


def _seed_of(ctx, seed) -> int:
    return ctx.obj["seed"] if seed is None else seed


# ---------------------------------------------------------------------------
# cipher commands


@cli.command()
@click.option("--scheme", type=click.Choice(["le", "pe", "ele", "etc"]), required=True)
@click.option("--block", type=int, default=None, help="Block size (etc: 8 or 16).")
@click.option("--scramble-only", is_flag=True, help="Run only the block-scrambling step.")
@click.option("--key-file", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--key-hex", default=None)
@click.argument("src", type=click.Path(exists=True, dir_okay=False))
@click.argument("dst", type=click.Path(dir_okay=False))
def encrypt(scheme, block, scramble_only, key_file, key_hex, src, dst):
    """Encrypt SRC (PNG) to DST with the configured scheme."""
    from .ciphers import encrypt as do_encrypt
    from .imagecore import load_png, save_png

    key = _load_key(key_file, key_hex)
    cfg = _scheme_config(scheme, block, scramble_only)
    img = load_png(src)
    save_png(dst, do_encrypt(img, key, cfg))
    click.echo(f"encrypted {src} -> {dst} ({scheme}, key {key.fingerprint()})")


@cli.command()
@click.option("--scheme", type=click.Choice(["le", "pe", "ele", "etc"]), required=True)
@click.option("--block", type=int, default=None)
@click.option("--scramble-only", is_flag=True)
@click.option("--key-file", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--key-hex", default=None)
@click.argument("src", type=click.Path(exists=True, dir_okay=False))
@click.argument("dst", type=click.Path(dir_okay=False))
def decrypt(scheme, block, scramble_only, key_file, key_hex, src, dst):
    """Decrypt SRC (PNG) to DST; exact inverse of encrypt for the same key."""
    from .ciphers import decrypt as do_decrypt
    from .imagecore import load_png, save_png

    key = _load_key(key_file, key_hex)
    cfg = _scheme_config(scheme, block, scramble_only)
    img = load_png(src)
    save_png(dst, do_decrypt(img, key, cfg))
    click.echo(f"decrypted {src} -> {dst} ({scheme}, key {key.fingerprint()})")


# ---------------------------------------------------------------------------
# dataset commands


@cli.command("make-dataset")
@click.option("--src", type=click.Path(exists=True, file_okay=False), default=None,
              help="Source image directory.")
@click.option("--synthetic", type=int, default=None,
              help="Generate this many synthetic shape images instead of --src.")
@click.option("--size", type=int, default=64, show_default=True)
@click.option("--scheme", type=click.Choice(["le", "pe", "ele", "etc"]), default="etc",
              show_default=True)
@click.option("--block", type=int, default=None)
@click.option("--split-ratio", type=float, default=0.9, show_default=True)
@click.option("--key-policy", type=click.Choice(["per-epoch", "fixed"]), default="per-epoch",
              show_default=True)
@click.option("--key-file", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--key-hex", default=None)
@click.option("--seed", type=int, default=None, help="Split/generation seed.")
@click.option("--out", type=click.Path(file_okay=False), default=None,
              help=f"Dataset root (default: ${DATA_ROOT_ENV}/dataset).")
@click.pass_context
def make_dataset(ctx, src, synthetic, size, scheme, block, split_ratio, key_policy,
                 key_file, key_hex, seed, out):
    """Build a paired dataset root with train/val manifests."""
    from .dataset import build_manifests
    from .shapes import synthesize_shapes

    if (src is None) == (synthetic is None):
        raise click.UsageError("provide exactly one of --src or --synthetic")
    if out is None:
        root = os.environ.get(DATA_ROOT_ENV)
        if root is None:
            raise click.UsageError(f"--out is required when ${DATA_ROOT_ENV} is unset")
        out = str(Path(root) / "dataset")
    seed = _seed_of(ctx, seed)
    key = _load_key(key_file, key_hex)
    cfg = _scheme_config(scheme, block, False)

    out = Path(out)
    if synthetic is not None:
        src = out / "synthetic_src"
        synthesize_shapes(src, synthetic, size, seed)
    train, val, skipped = build_manifests(
        src, cfg, size, split_ratio, key, out,
        key_policy_kind=key_policy.replace("-", "_"), seed=seed,
    )
    _write_run_manifest(out, "make-dataset", {
        "src": str(src), "size": size, "scheme": cfg.to_dict(),
        "split_ratio": split_ratio, "key_policy": key_policy,
        "key_fingerprint": key.fingerprint(), "seed": seed, "skipped": skipped,
    }, {"src": src})
    click.echo(f"dataset at {out}: {len(train)} train / {len(val)} val"
               + (f" ({skipped} skipped)" if skipped else ""))


@cli.command("export-pairs")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--key-file", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--key-hex", default=None)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def export_pairs_cmd(manifest_path, key_file, key_hex, out):
    """Freeze one keyed encryption of every manifest entry to disk."""
    from .dataset import PairManifest, export_pairs

    key = _load_key(key_file, key_hex)
    manifest = PairManifest.load(manifest_path).attach_key(key)
    count = export_pairs(manifest, key, out)
    _write_run_manifest(Path(out), "export-pairs", {
        "manifest": str(manifest_path), "key_fingerprint": key.fingerprint(),
    }, {"manifest": manifest_path})
    click.echo(f"exported {count} pairs to {out}")


# ---------------------------------------------------------------------------
# embedding commands


@cli.command("train-embedder")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False),
              required=True, help="Train-split manifest; uses its plain images.")
@click.option("--out", type=click.Path(dir_okay=False), required=True,
              help="Embedder spec JSON path; weights are written next to it.")
@click.option("--dim", type=int, default=768, show_default=True)
@click.option("--steps", type=int, default=1500, show_default=True)
@click.option("--batch", type=int, default=32, show_default=True)
@click.option("--lr", type=float, default=1e-3, show_default=True)
@click.option("--seed", type=int, default=None)
@click.pass_context
def train_embedder(ctx, manifest_path, out, dim, steps, batch, lr, seed):
    """Train the contrastive toy_conv embedder on plain images and freeze it."""
    from .dataset import PairManifest
    from .embedder import save_toy_conv, train_toy_conv

    seed = _seed_of(ctx, seed)
    manifest = PairManifest.load(manifest_path)
    images = manifest.load_all_plain()
    model = train_toy_conv(images, d=dim, seed=seed, steps=steps, batch=batch, lr=lr)
    spec = save_toy_conv(model, out)
    _write_run_manifest(Path(out).parent, "train-embedder", {
        "manifest": str(manifest_path), "dim": dim, "steps": steps,
        "batch": batch, "lr": lr, "seed": seed,
        "embedder_fingerprint": spec.fingerprint(),
    }, {"manifest": manifest_path})
    click.echo(f"embedder spec at {out} (fingerprint {spec.fingerprint()})")


@cli.command()
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Use this manifest's plain images as the corpus.")
@click.option("--dir", "corpus_dir", type=click.Path(exists=True, file_okay=False),
              default=None, help="Or a directory of plain PNGs.")
@click.option("--embedder", "embedder_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--scheme", type=click.Choice(["le", "pe", "ele", "etc"]), required=True)
@click.option("--block", type=int, default=None)
@click.option("--keys", "n_keys", type=int, default=2, show_default=True,
              help="Number of distinct analysis keys.")
@click.option("--key-file", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--key-hex", default=None)
@click.option("--limit", type=int, default=64, show_default=True,
              help="Cap on corpus images used.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
def similarity(manifest_path, corpus_dir, embedder_path, scheme, block, n_keys,
               key_file, key_hex, limit, out):
    """Corpus-mean embedding similarity between plain and encrypted variants."""
    from .embedder import corpus_variant_matrix, unrelated_pair_mean
    from .imagecore import load_png
    from .report import write_matrix_csv

    if (manifest_path is None) == (corpus_dir is None):
        raise click.UsageError("provide exactly one of --manifest or --dir")
    if n_keys < 1:
        raise click.UsageError("--keys must be at least 1")
    base_key = _load_key(key_file, key_hex)
    cfg = _scheme_config(scheme, block, False)
    _, emb = _load_embedder(embedder_path)

    if manifest_path is not None:
        from .dataset import PairManifest

        manifest = PairManifest.load(manifest_path)
        images = [manifest.load_plain(i) for i in range(min(limit, len(manifest)))]
        corpus_input = manifest_path
    else:
        paths = sorted(Path(corpus_dir).glob("*.png"))[:limit]
        if not paths:
            raise DataError(f"no PNG files under {corpus_dir}")
        images = [load_png(p) for p in paths]
        corpus_input = corpus_dir

    from .ciphers import encrypt as do_encrypt

    variants = {"plain": images}
    keys = [derive_epoch_key(base_key, i) for i in range(n_keys)]
    for i, key in enumerate(keys, start=1):
        variants[f"{scheme}(K{i})"] = [do_encrypt(img, key, cfg) for img in images]
    mat, labels = corpus_variant_matrix(emb, variants)
    baseline = unrelated_pair_mean(emb, images)

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(out / f"similarity_{scheme}.csv", mat, labels)
    stats_path = out / f"similarity_{scheme}_stats.csv"
    with open(stats_path, "w") as fh:
        fh.write("stat,value\n")
        fh.write(f"plain_encrypted_mean,{mat[0, 1]:.8f}\n")
        if n_keys >= 2:
            fh.write(f"encrypted_encrypted_mean,{mat[1, 2]:.8f}\n")
        fh.write(f"unrelated_plain_mean,{baseline:.8f}\n")
    _write_run_manifest(out, "similarity", {
        "corpus": str(corpus_input), "embedder": str(embedder_path),
        "scheme": cfg.to_dict(), "keys": n_keys, "limit": limit,
        "base_key_fingerprint": base_key.fingerprint(),
    }, {"corpus": corpus_input, "embedder": embedder_path})
    click.echo(f"similarity matrix for {scheme} written to {out}")


# ---------------------------------------------------------------------------
# attack commands


@cli.command("train-attack")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False),
              required=True, help="Train-split manifest.")
@click.option("--embedder", "embedder_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--key-file", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--key-hex", default=None)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--steps", type=int, default=20_000, show_default=True,
              help="Optimization steps (per stage for the two-stage curriculum).")
@click.option("--lr", type=float, default=DESK_LR, show_default=True,
              help="Desk-scale default; the reference protocol value is 3e-5.")
@click.option("--batch", type=int, default=8, show_default=True)
@click.option("--weight-decay", type=float, default=0.01, show_default=True)
@click.option("--cond-dropout", type=float, default=0.10, show_default=True)
@click.option("--stage", type=click.Choice(["single", "two-stage-etc"]), default="single",
              show_default=True)
@click.option("--timesteps", type=int, default=DESK_TIMESTEPS, show_default=True)
@click.option("--base", type=int, default=DESK_BASE, show_default=True,
              help="Denoiser base width (desk default; 64 for the full-size model).")
@click.option("--channel-mults", default="1,2,4", show_default=True)
@click.option("--blocks", type=int, default=DESK_BLOCKS, show_default=True)
@click.option("--time-dim", type=int, default=DESK_TIME_DIM, show_default=True)
@click.option("--require-val/--no-require-val", default=True, show_default=True,
              help="Refuse to train when the sibling val manifest is empty.")
@click.option("--seed", type=int, default=None)
@click.pass_context
def train_attack_cmd(ctx, manifest_path, embedder_path, key_file, key_hex, out, steps,
                     lr, batch, weight_decay, cond_dropout, stage, timesteps, base,
                     channel_mults, blocks, time_dim, require_val, seed):
    """Train the conditional-diffusion reconstruction attack."""
    from .dataset import PairManifest
    from .diffusion import DenoiserConfig, NoiseSchedule, TrainConfig, train_attack

    seed = _seed_of(ctx, seed)
    key = _load_key(key_file, key_hex)
    manifest = PairManifest.load(manifest_path).attach_key(key)
    if require_val:
        val_path = Path(manifest_path).parent / "manifest_val.json"
        if not val_path.exists() or len(PairManifest.load(val_path)) == 0:
            raise DataError(
                "validation split is missing or empty; rebuild the dataset with "
                "split ratio < 1 or pass --no-require-val"
            )
    spec, emb = _load_embedder(embedder_path)

    try:
        mults = tuple(int(x) for x in channel_mults.split(","))
    except ValueError as exc:
        raise click.UsageError(f"bad --channel-mults: {exc}") from exc
    cfg = TrainConfig(steps=steps, lr=lr, weight_decay=weight_decay,
                      cond_dropout=cond_dropout, batch=batch,
                      stage=stage.replace("-", "_"))
    model_cfg = DenoiserConfig(base=base, channel_mults=mults, blocks=blocks,
                               cond_dim=spec.d, time_dim=time_dim)
    sched = NoiseSchedule.linear(timesteps)

    def progress(step, total, loss):
        click.echo(f"  step {step}/{total} loss {loss:.4f}")

    result = train_attack(manifest, emb, spec.fingerprint(), cfg, model_cfg, sched,
                          out, seed=seed, progress=progress)
    _write_run_manifest(Path(out), "train-attack", {
        "manifest": str(manifest_path), "embedder": str(embedder_path),
        "key_fingerprint": key.fingerprint(), "train_config": cfg.to_dict(),
        "model_config": model_cfg.to_dict(), "timesteps": timesteps, "seed": seed,
        "final_loss": result["final_loss"],
    }, {"manifest": manifest_path, "embedder": embedder_path})
    click.echo(f"checkpoint at {result['checkpoint']} (final loss {result['final_loss']:.4f})")


@cli.command()
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--embedder", "embedder_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--encrypted-dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--guidance-scale", type=float, default=3.0, show_default=True)
@click.option("--sample-steps", type=int, default=None,
              help="Reverse steps (default: the full ancestral chain).")
@click.option("--batch", type=int, default=32, show_default=True)
@click.option("--seed", type=int, default=None)
@click.pass_context
def attack(ctx, checkpoint_path, embedder_path, encrypted_dir, out, guidance_scale,
           sample_steps, batch, seed):
    """Reconstruct every encrypted PNG in a directory with the trained model."""
    from .diffusion import SampleConfig, load_checkpoint, sample_batch
    from .imagecore import load_png, save_png

    seed = _seed_of(ctx, seed)
    model, sched, meta = load_checkpoint(checkpoint_path)
    spec, emb = _load_embedder(embedder_path)
    if spec.fingerprint() != meta["embedder_fingerprint"]:
        raise DataError(
            f"embedder fingerprint {spec.fingerprint()} does not match the one the "
            f"checkpoint was trained with ({meta['embedder_fingerprint']})"
        )
    paths = sorted(Path(encrypted_dir).glob("*.png"))
    if not paths:
        raise DataError(f"no PNG files under {encrypted_dir}")
    scfg = SampleConfig(guidance_scale=guidance_scale, steps=sample_steps, seed=seed)
    size = meta["image_size"]

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for start in range(0, len(paths), batch):
        chunk = paths[start : start + batch]
        conds = emb.embed_batch(np.stack([load_png(p) for p in chunk]))
        # noise streams are tied to corpus position, so batching cannot matter
        images = sample_batch(model, conds, size, scfg, sched, index_offset=start)
        for path, img in zip(chunk, images):
            save_png(out / path.name, img)
        click.echo(f"  reconstructed {min(start + batch, len(paths))}/{len(paths)}")
    _write_run_manifest(out, "attack", {
        "checkpoint": str(checkpoint_path), "embedder": str(embedder_path),
        "encrypted_dir": str(encrypted_dir), "guidance_scale": guidance_scale,
        "sample_steps": sample_steps, "seed": seed,
    }, {"checkpoint": checkpoint_path, "embedder": embedder_path,
        "encrypted_dir": encrypted_dir})
    click.echo(f"{len(paths)} reconstructions written to {out}")


@cli.command()
@click.option("--plain", "plain_dir", type=click.Path(exists=True, file_okay=False),
              required=True)
@click.option("--recon", "recon_dir", type=click.Path(exists=True, file_okay=False),
              required=True)
@click.option("--embedder", "embedder_path", type=click.Path(exists=True, dir_okay=False),
              required=True, help="toy_conv spec backing the LPIPS-proxy features.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
def score(plain_dir, recon_dir, embedder_path, out):
    """Score reconstructions against plain images (LPIPS-proxy + baselines)."""
    from .embedder import ToyConvEmbedder
    from .metrics import ToyConvFeatures, score_dir

    spec, emb = _load_embedder(embedder_path)
    if not isinstance(emb, ToyConvEmbedder):
        raise DataError("scoring requires a toy_conv embedder spec")
    report = score_dir(ToyConvFeatures(emb), plain_dir, recon_dir, out_dir=out)
    _write_run_manifest(Path(out), "score", {
        "plain": str(plain_dir), "recon": str(recon_dir),
        "embedder": str(embedder_path), "metric": "LPIPS-proxy",
    }, {"plain": plain_dir, "recon": recon_dir, "embedder": embedder_path})
    s = report.summary()
    click.echo(f"scored {len(report.ids)} pairs: mean {s['mean']:.4f}, median {s['median']:.4f}")


@cli.command()
@click.argument("run_dirs", nargs=-1, required=True,
                type=click.Path(exists=True, file_okay=False))
@click.option("--out", type=click.Path(file_okay=False), required=True)
def report(run_dirs, out):
    """Aggregate completed runs into summary CSVs and static figures."""
    from .report import aggregate_runs

    artifacts = aggregate_runs(list(run_dirs), out)
    _write_run_manifest(Path(out), "report", {
        "run_dirs": [str(r) for r in run_dirs],
    }, {f"run{i}": r for i, r in enumerate(run_dirs)})
    produced = [artifacts["summary"], *artifacts.get("heatmaps", [])]
    if "boxplot" in artifacts:
        produced.append(artifacts["boxplot"])
    click.echo(f"report artifacts in {out}: " + ", ".join(sorted(p.name for p in produced)))


def run(argv=None) -> int:
    """Execute the CLI and map exceptions onto the documented exit codes."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        if exc.ctx is not None:
            click.echo(exc.ctx.get_usage(), err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except NumericError as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        return 3
    except (DataError, OSError) as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
