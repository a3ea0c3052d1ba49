"""
Point d'entrée principal : ligne de commande du codec ECRF.

    python -m src.main train --scene blobs3 --lambda-e 2e-10
    python -m src.main compress runs/model.ckpt -o runs/model.ecrf --report
    python -m src.main rd-sweep --lambdas 0,2e-10,2e-9 --alphas 0,1
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import torch

from src.codec import decode, encode, quantized_model, read_bitstream, write_bitstream
from src.constants import *
from src.etl import SceneDataLoader
from src.helpers_business import calibrate_lambdas, evaluate_views, run_sweep_cell, stage_size_report
from src.helpers_export import (
    append_train_log,
    export_eval_to_csv,
    export_gradcheck_to_csv,
    export_size_report_to_csv,
    export_sweep_to_csv,
    save_png,
)
from src.helpers_files import (
    ensure_directory_exists,
    get_output_filename,
    get_output_root,
    load_json_config,
    load_yaml_config,
    merge_config,
)
from src.helpers_serialize import (
    deserialize_run_config,
    load_checkpoint,
    save_checkpoint,
    save_run_config,
    with_bounding_box,
)
from src.model import (
    BadMagicError,
    BitstreamError,
    BlockDims,
    CheckpointError,
    ConfigurationError,
    RunConfig,
)
from src.renderer import psnr, render_image
from src.repository import ViewRepository
from src.scenes import PRESETS, resolve_scene, save_scene, scene_schema
from src.trainer import RayBatch, gradient_check, new_train_state, train

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = Path(__file__).parent / "config.yaml"


def _float_list(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _str_list(text: str) -> List[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _overrides(args) -> Dict:
    """Options de la ligne de commande, dans la structure de config.yaml."""
    get = lambda name: getattr(args, name, None)
    resolution = get("resolution")
    return {
        "grid": {
            "resolution": [resolution] * 3 if resolution else None,
            "rank": get("rank"),
            "density_channels": get("channels"),
            "appearance_channels": get("channels"),
            "coeff_step": get("coeff_step"),
        },
        "blocks": {"matrix": get("matrix_block"), "vector": get("vector_block")},
        "loss": {
            "lambda_e": get("lambda_e"),
            "alpha": get("alpha"),
            "iterations": get("iterations"),
            "rate_domain": get("rate_domain"),
        },
        "training": {"batch_size": get("batch_size")},
        "renderer": {"n_samples": get("n_samples")},
        "scene": get("scene"),
        "seed": get("seed"),
    }


def build_run_config(args) -> Tuple[RunConfig, Dict]:
    """Défauts YAML < fichier JSON --config < options ; la boîte vient de la scène."""
    data = load_yaml_config(str(DEFAULT_CONFIG))
    if getattr(args, "config", None):
        data = merge_config(data, load_json_config(args.config))
    data = merge_config(data, _overrides(args))
    config = deserialize_run_config(data)
    if getattr(args, "no_cache", False):
        config = replace(config, cache_path=None)
    spec = resolve_scene(config.scene)
    return with_bounding_box(config, spec.bounding_box), data


def output_dir(args, config: RunConfig) -> Path:
    if getattr(args, "out", None):
        return ensure_directory_exists(args.out)
    return ensure_directory_exists(get_output_root(config.output_dir))


def scene_loader(config: RunConfig) -> SceneDataLoader:
    spec = resolve_scene(config.scene)
    repository = ViewRepository(config.cache_path) if config.cache_path else None
    return SceneDataLoader(spec, repository)


def oracle_samples(config: RunConfig) -> int:
    return ORACLE_SAMPLE_FACTOR * config.render.n_samples


def held_out_views(loader: SceneDataLoader, config: RunConfig):
    return list(zip(loader.cameras("test"), loader.fetch_views("test", oracle_samples(config))))


def load_model(path):
    """
    Point de contrôle ou flux compressé, reconnu par sa signature.
    Renvoie (grille, MLP, domaine de codage enregistré).
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(ERR_CHECKPOINT.format(f"fichier introuvable {path}"))
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == BITSTREAM_MAGIC:
        bitstream = read_bitstream(path)
        grid, mlp = decode(bitstream)
        return grid, mlp, bitstream.rate_domain
    if magic == CHECKPOINT_MAGIC:
        grid, mlp, _, domain = load_checkpoint(path)
        return grid, mlp, domain
    raise BadMagicError(ERR_BAD_MAGIC.format(magic, BITSTREAM_MAGIC))


def cmd_train(args) -> int:
    config, _ = build_run_config(args)
    out = output_dir(args, config)
    save_run_config(config, out / RUN_CONFIG_NAME)
    loader = scene_loader(config)
    dataset = loader.build_ray_dataset("train", oracle_samples(config))
    views = held_out_views(loader, config)

    log_path = out / TRAIN_LOG_NAME
    if log_path.exists():
        log_path.unlink()
    state, _ = train(config, dataset, views, log_row=lambda row: append_train_log(row, log_path))
    save_checkpoint(out / CHECKPOINT_NAME, state.grid, state.mlp, state.entropy, config.loss.rate_domain)

    scores = evaluate_views(state.grid, state.mlp, views, config.render)
    df = export_eval_to_csv(scores, out / EVAL_NAME)
    logger.info("PSNR test moyen : %.2f dB", df["psnr"].iloc[-1])
    print(f"PSNR test moyen : {df['psnr'].iloc[-1]:.2f} dB -> {out / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_compress(args) -> int:
    config, _ = build_run_config(args)
    grid, mlp, entropy, domain = load_checkpoint(args.checkpoint)
    if entropy is None:
        raise CheckpointError(ERR_CHECKPOINT.format("modèle d'entropie absent"))
    bitstream = encode(grid, mlp, entropy, domain)
    target = Path(args.output) if args.output else Path(args.checkpoint).parent / BITSTREAM_NAME
    size = write_bitstream(bitstream, target)
    save_run_config(config, target.with_name(RUN_CONFIG_NAME))
    report = bitstream.size_report()
    print(
        f"{target} : {size} octets (en-tête {report.header_bytes}, MLP {report.mlp_bytes}, "
        f"charge utile {report.payload_bytes}, écrêtés {report.saturation})"
    )
    if args.report:
        loader = scene_loader(config)
        rows = stage_size_report(grid, mlp, entropy, held_out_views(loader, config), config.render, domain)
        export_size_report_to_csv(rows, target.with_name(get_output_filename("size_report", "csv")))
        for row in rows:
            print(f"{row['stage']:<26} {row['size_bytes']:>10} octets  {row['psnr']:.2f} dB")
    return EXIT_OK


def cmd_decompress(args) -> int:
    bitstream = read_bitstream(args.bitstream)
    grid, mlp = decode(bitstream)
    target = Path(args.output or Path(args.bitstream).with_suffix(".ckpt"))
    save_checkpoint(target, grid, mlp, rate_domain=bitstream.rate_domain)
    print(f"{target}")
    return EXIT_OK


def cmd_render(args) -> int:
    config, _ = build_run_config(args)
    grid, mlp, _ = load_model(args.model)
    loader = scene_loader(config)
    cams = loader.cameras(args.split)
    indices = [args.index] if args.index is not None else range(len(cams))
    out = ensure_directory_exists(args.output or output_dir(args, config) / "renders")
    for i in indices:
        if not 0 <= i < len(cams):
            raise ConfigurationError(ERR_RUN_CONFIG.format(f"index={i}"))
        image = render_image(grid, mlp, cams[i], config.render)
        save_png(image, out / get_output_filename(f"{args.split}", "png", f"{i:03d}"))
    save_run_config(config, out / RUN_CONFIG_NAME)
    print(f"{len(indices)} images -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config, _ = build_run_config(args)
    out = output_dir(args, config)
    loader = scene_loader(config)
    views = held_out_views(loader, config)
    if args.model == "oracle":
        scores = [psnr(image, image) for _, image in views]
    else:
        grid, mlp, domain = load_model(args.model)
        if args.quantized:
            grid, mlp = quantized_model(grid, mlp, domain)
        scores = evaluate_views(grid, mlp, views, config.render)
    target = Path(args.output) if args.output else out / EVAL_NAME
    df = export_eval_to_csv(scores, target)
    save_run_config(config, target.with_name(RUN_CONFIG_NAME))
    print(df.to_string(index=False))
    return EXIT_OK


def _sweep_cell(config, block: str, domain: str, alpha: float, lambda_e: float, dataset, views) -> Dict:
    try:
        cell = replace(
            config,
            grid=replace(config.grid, matrix_block=BlockDims.parse(block)),
            loss=replace(config.loss, lambda_e=lambda_e, alpha=alpha, rate_domain=domain),
        )
    except ConfigurationError as e:
        logger.warning("Cellule invalide (%s, %s) : %s", block, domain, e)
        return {
            "lambda_e": lambda_e,
            "alpha": alpha,
            "blocks": block,
            "domain": domain,
            "status": f"error: {e}",
        }
    logger.info("Cellule λ_e=%g α=%g blocs=%s domaine=%s", lambda_e, alpha, block, domain)
    return run_sweep_cell(cell, dataset, views)


def cmd_rd_sweep(args) -> int:
    config, _ = build_run_config(args)
    out = output_dir(args, config)
    save_run_config(config, out / RUN_CONFIG_NAME)
    lambdas = _float_list(args.lambdas) if args.lambdas else list(config.sweep.lambdas)
    alphas = _float_list(args.alphas) if args.alphas else list(config.sweep.alphas)
    blocks = _str_list(args.blocks) if args.blocks else [str(config.grid.matrix_block)]
    domains = _str_list(args.domains) if args.domains else [config.loss.rate_domain]
    if (not lambdas and not args.calibrate) or not alphas:
        raise ConfigurationError(ERR_RUN_CONFIG.format("listes λ_e et α non vides requises"))

    loader = scene_loader(config)
    dataset = loader.build_ray_dataset("train", oracle_samples(config))
    views = held_out_views(loader, config)
    rows = []
    for block in blocks:
        for domain in domains:
            cells, cell_lambdas = {}, lambdas
            if args.calibrate:
                # Référence λ_e = 0 au premier α, réutilisée comme ligne du tableau
                baseline = _sweep_cell(config, block, domain, alphas[0], 0.0, dataset, views)
                cells[(alphas[0], 0.0)] = baseline
                cell_lambdas = [0.0] + calibrate_lambdas(baseline, config.sweep.calibration_ratios)
            for alpha in alphas:
                for lambda_e in cell_lambdas:
                    row = cells.get((alpha, lambda_e))
                    if row is None:
                        row = _sweep_cell(config, block, domain, alpha, lambda_e, dataset, views)
                    rows.append(row)
    df = export_sweep_to_csv(rows, out / get_output_filename("rd_sweep", "csv"))
    print(df.to_string(index=False))
    return EXIT_OK


def cmd_scene_gen(args) -> int:
    spec = resolve_scene(args.name)
    target = save_scene(spec, args.output or f"{spec.name}.json")
    print(f"{target}")
    return EXIT_OK


def cmd_scene_schema(args) -> int:
    text = json.dumps(scene_schema(), indent=2)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    config, _ = build_run_config(args)
    out = output_dir(args, config)
    loader = scene_loader(config)
    dataset = loader.build_ray_dataset("train", oracle_samples(config))
    state = new_train_state(config, dtype=torch.float64)
    rays, colors = dataset.sample_batch(args.rays, state.generator)
    batch = RayBatch(rays, colors, dataset.near, dataset.far)
    loss = config.loss
    if loss.lambda_e == 0:
        loss = replace(loss, lambda_e=1e-3)
    report = gradient_check(state, batch, loss, config.render, samples=args.samples)
    export_gradcheck_to_csv(report, out / get_output_filename("gradcheck", "csv"))
    for family, error in report.max_rel_error.items():
        print(f"{family:<8} {report.samples[family]:>4} paramètres  erreur relative max {error:.3e}")
    return EXIT_OK if report.passed(args.tolerance) else EXIT_RUNTIME


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="fichier de configuration JSON")
    parser.add_argument("--scene", help=f"préréglage ({', '.join(PRESETS)}) ou fichier SceneSpec")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="répertoire de sortie")
    parser.add_argument("--no-cache", action="store_true", help="ignore le cache des vues")
    parser.add_argument("--iterations", type=int)
    parser.add_argument("--lambda-e", type=float)
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--rate-domain", choices=RATE_DOMAINS)
    parser.add_argument("--matrix-block", help="ex. 16x16x16")
    parser.add_argument("--vector-block", help="ex. 8x8")
    parser.add_argument("--resolution", type=int)
    parser.add_argument("--rank", type=int)
    parser.add_argument("--channels", type=int)
    parser.add_argument("--coeff-step", type=float)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--n-samples", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ecrf", description="Champs de radiance tensoriels compressés par entropie"
    )
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="entraîne une grille sur une scène")
    _add_run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="point de contrôle -> flux compressé")
    p.add_argument("checkpoint")
    p.add_argument("-o", "--output")
    p.add_argument("--report", action="store_true", help="tableau des tailles par étape")
    _add_run_options(p)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="flux compressé -> point de contrôle")
    p.add_argument("bitstream")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("render", help="images PNG depuis un point de contrôle ou un flux")
    p.add_argument("model")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--index", type=int)
    p.add_argument("-o", "--output")
    _add_run_options(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR par vue de test ; `oracle` compare la référence à elle-même")
    p.add_argument("model")
    p.add_argument("--quantized", action="store_true", help="évalue le modèle quantifié en mémoire")
    p.add_argument("-o", "--output")
    _add_run_options(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rd-sweep", help="balayage débit-distorsion")
    p.add_argument("--lambdas", help="liste de λ_e séparés par des virgules (défaut : sweep.lambdas)")
    p.add_argument("--alphas", help="liste de α (défaut : sweep.alphas)")
    p.add_argument(
        "--calibrate",
        action="store_true",
        help="entraîne λ_e = 0 puis dérive les λ_e de sweep.calibration_ratios",
    )
    p.add_argument("--blocks", help="blocs de matrices, ex. 1x8x8,16x16x16")
    p.add_argument("--domains", help="frequency,spatial")
    _add_run_options(p)
    p.set_defaults(func=cmd_rd_sweep)

    p = sub.add_parser("scene", help="documents de scène")
    scene_sub = p.add_subparsers(dest="scene_command", required=True)
    g = scene_sub.add_parser("gen", help="écrit un préréglage en JSON")
    g.add_argument("name", choices=sorted(PRESETS))
    g.add_argument("-o", "--output")
    g.set_defaults(func=cmd_scene_gen)
    s = scene_sub.add_parser("schema", help="schéma JSON de SceneSpec")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_scene_schema)

    p = sub.add_parser("gradcheck", help="gradients analytiques contre différences finies")
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--rays", type=int, default=16)
    p.add_argument("--tolerance", type=float, default=1e-3)
    _add_run_options(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigurationError as e:
        logger.error("%s", e)
        print(f"erreur de configuration : {e}", file=sys.stderr)
        return EXIT_USAGE
    except BitstreamError as e:
        logger.error("%s", e)
        print(f"flux invalide : {e}", file=sys.stderr)
        return EXIT_BITSTREAM
    except CheckpointError as e:
        logger.error("%s", e)
        print(f"point de contrôle invalide : {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except Exception as e:
        logger.exception("Échec de la commande %s", args.command)
        print(f"erreur : {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
