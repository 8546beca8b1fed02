"""Module containing the implementation for the `arflow` command line."""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from arflow.checkpoint import load_bundle
from arflow.config import (
    CONDITIONING_MODES,
    CodecConfig,
    EvalConfig,
    GenDataConfig,
    GRPOConfig,
    PipelineConfig,
    TrainConfig,
    load_config,
    write_resolved,
)
from arflow.data import make_dataset
from arflow.errors import EXIT_OK, EXIT_RUNTIME, ArflowError, UsageError
from arflow.evaluation import evaluate
from arflow.generator import PipelineGenerator
from arflow.grammar import parse_instruction, parse_prompt
from arflow.pipeline import REPORT_FILE, run_pipeline
from arflow.rl import run_grpo
from arflow.trainer import pretrain, sft, train_codecs
from arflow.utils import load_ppm, save_ppm, write_json


logger = logging.getLogger(__name__)


class ArgumentParser(argparse.ArgumentParser):
    """Argument parser reporting wrong arguments as a `UsageError`, so they go
    through the same one-line error report as every other failure.
    """

    def error(self, message: str):
        raise UsageError(message)


def common_args(parser: argparse.ArgumentParser):
    """Add common arguments to the given parser.

    Args:
        parser (argparse.ArgumentParser): Parser where to add the arguments.
    """
    parser.add_argument(
        "--config",
        "-c",
        dest="config",
        type=str,
        default=None,
        help="JSON configuration file. Command line flags take precedence over its values.",
    )
    parser.add_argument("--seed", "-S", dest="seed", type=int, default=None, help="Seed of the run.")
    parser.add_argument(
        "--out_dir", "-O", dest="out_dir", type=str, default=None, help="Folder where the artifacts are written."
    )
    parser.add_argument(
        "--threads", "-T", dest="threads", type=int, default=None, help="Maximum number of threads (rollouts, eval)."
    )


def training_args(parser: argparse.ArgumentParser):
    """Add the arguments of the joint training commands to the given parser.

    Args:
        parser (argparse.ArgumentParser): Parser where to add the arguments.
    """
    parser.add_argument("--data_dir", dest="data_dir", type=str, default=None, help="Dataset written by `gen-data`.")
    parser.add_argument(
        "--codec_ckpt", dest="codec_ckpt", type=str, default=None, help="Checkpoint written by `train-codec`."
    )
    parser.add_argument("--steps", dest="steps", type=int, default=None, help="Number of optimization steps.")
    parser.add_argument("--lambda", dest="lambda", type=float, default=None, help="Weight of the diffusion loss.")
    parser.add_argument("--lr", dest="lr", type=float, default=None, help="Learning rate.")
    parser.add_argument("--batch_size", dest="batch_size", type=int, default=None, help="Number of examples per step.")


def overrides(args: argparse.Namespace, *names: str) -> Dict:
    """Values of the given flags, to override the configuration file."""
    return {n: getattr(args, n) for n in ("seed", "out_dir", "threads") + names}


def build_parser() -> ArgumentParser:
    """Create the parser of the `arflow` command line."""
    parser = ArgumentParser(prog="arflow", description="Arflow's command line.")
    parser.add_argument(
        "--verbose", "-v", dest="verbose", action="store_true", default=False, help="Show the training logs."
    )
    subparsers = parser.add_subparsers(title="commands", dest="cmd")

    gen_parser = subparsers.add_parser("gen-data", help="Generate a synthetic dataset.")
    gen_parser.set_defaults(cmd="gen-data")
    common_args(gen_parser)
    gen_parser.add_argument("--t2i", dest="t2i", type=int, default=None, help="Number of text-to-image records.")
    gen_parser.add_argument("--recon", dest="recon", type=int, default=None, help="Number of reconstruction records.")
    gen_parser.add_argument("--edit", dest="edit", type=int, default=None, help="Number of editing records.")

    codec_parser = subparsers.add_parser("train-codec", help="Train the k-means tokenizer and the VAE.")
    codec_parser.set_defaults(cmd="train-codec")
    common_args(codec_parser)
    codec_parser.add_argument("--data_dir", dest="data_dir", type=str, default=None, help="Dataset to train on.")
    codec_parser.add_argument("--codebook_size", dest="codebook_size", type=int, default=None, help="Number of codes.")
    codec_parser.add_argument("--vae_steps", dest="vae_steps", type=int, default=None, help="VAE training steps.")

    pretrain_parser = subparsers.add_parser("pretrain", help="Jointly pretrain the AR and diffusion models.")
    pretrain_parser.set_defaults(cmd="pretrain")
    common_args(pretrain_parser)
    training_args(pretrain_parser)

    sft_parser = subparsers.add_parser("sft", help="Fine-tune a pretrained checkpoint.")
    sft_parser.set_defaults(cmd="sft")
    common_args(sft_parser)
    training_args(sft_parser)
    sft_parser.add_argument("--resume", dest="resume", type=str, required=True, help="Checkpoint to resume from.")
    sft_parser.add_argument("--curate", dest="curate", type=int, default=None, help="Size of the curated subset.")

    rl_parser = subparsers.add_parser("rl", help="Optimize a checkpoint with GRPO (or Flow-GRPO).")
    rl_parser.set_defaults(cmd="rl")
    common_args(rl_parser)
    rl_parser.add_argument("--resume", dest="resume", type=str, required=True, help="Checkpoint to start from.")
    rl_parser.add_argument(
        "--reward", dest="reward", type=str, default=None, choices=["composition", "glyph"], help="Reward to optimize."
    )
    rl_parser.add_argument(
        "--flow-grpo",
        dest="flow_grpo",
        action="store_true",
        default=None,
        help="If specified, the diffusion model is optimized (SDE trajectories) and the AR model is frozen.",
    )
    rl_parser.add_argument("--dump", dest="dump", type=str, default=None, help="Folder where rollouts are saved.")
    rl_parser.add_argument("--iterations", dest="iterations", type=int, default=None, help="Number of iterations.")

    eval_parser = subparsers.add_parser("eval", help="Run a benchmark suite on a checkpoint.")
    eval_parser.set_defaults(cmd="eval")
    common_args(eval_parser)
    eval_parser.add_argument("--ckpt", dest="ckpt", type=str, required=True, help="Checkpoint to evaluate.")
    eval_parser.add_argument(
        "--suite", dest="suite", type=str, default=None, choices=["composition", "editing", "glyphs"], help="Suite."
    )
    eval_parser.add_argument("--n", dest="n", type=int, default=None, help="Prompts per category (or cases).")
    eval_parser.add_argument("--mode", dest="mode", type=str, default=None, choices=CONDITIONING_MODES)
    eval_parser.add_argument("--out", dest="out", type=str, default=None, help="Where to write the report.")

    sample_parser = subparsers.add_parser("sample", help="Generate one image from a prompt.")
    sample_parser.set_defaults(cmd="sample")
    sample_parser.add_argument("--ckpt", dest="ckpt", type=str, required=True, help="Checkpoint to use.")
    sample_parser.add_argument("--prompt", dest="prompt", type=str, required=True, help="Prompt of the grammar.")
    sample_parser.add_argument("--seed", dest="seed", type=int, default=0, help="Seed of the generation.")
    sample_parser.add_argument("--out", dest="out", type=str, required=True, help="Where to write the PPM image.")
    sample_parser.add_argument("--ode_steps", dest="ode_steps", type=int, default=20, help="Number of Euler steps.")
    sample_parser.add_argument(
        "--temperature",
        dest="temperature",
        type=float,
        default=None,
        help="If specified, the image tokens are sampled at this temperature instead of greedily.",
    )

    edit_parser = subparsers.add_parser("edit", help="Edit one image following an instruction.")
    edit_parser.set_defaults(cmd="edit")
    edit_parser.add_argument("--ckpt", dest="ckpt", type=str, required=True, help="Checkpoint to use.")
    edit_parser.add_argument("--image", dest="image", type=str, default=None, help="32x32 PPM image to edit.")
    edit_parser.add_argument("--instruction", dest="instruction", type=str, required=True, help="Instruction.")
    edit_parser.add_argument("--mode", dest="mode", type=str, default="both", choices=CONDITIONING_MODES)
    edit_parser.add_argument("--seed", dest="seed", type=int, default=0, help="Seed of the generation.")
    edit_parser.add_argument("--out", dest="out", type=str, required=True, help="Where to write the PPM image.")
    edit_parser.add_argument("--ode_steps", dest="ode_steps", type=int, default=20, help="Number of Euler steps.")

    pipeline_parser = subparsers.add_parser("pipeline", help="Run every stage, resuming from completed ones.")
    pipeline_parser.set_defaults(cmd="pipeline")
    common_args(pipeline_parser)
    return parser


def gen_data_cmd(args: argparse.Namespace):
    config = load_config(GenDataConfig, args.config, overrides(args, "t2i", "recon", "edit"))
    write_resolved(config)
    print(make_dataset(config))


def train_codec_cmd(args: argparse.Namespace):
    config = load_config(CodecConfig, args.config, overrides(args, "data_dir", "codebook_size", "vae_steps"))
    write_resolved(config)
    print(train_codecs(config))


def training_cmd(args: argparse.Namespace):
    names = ("data_dir", "codec_ckpt", "steps", "lambda", "lr", "batch_size")
    names += ("curate",) if args.cmd == "sft" else ()
    config = load_config(TrainConfig, args.config, overrides(args, *names))
    write_resolved(config)
    print(pretrain(config) if args.cmd == "pretrain" else sft(config, args.resume))


def rl_cmd(args: argparse.Namespace):
    config = load_config(GRPOConfig, args.config, overrides(args, "reward", "flow_grpo", "dump", "iterations"))
    write_resolved(config)
    ckpt, _ = run_grpo(config, args.resume)
    print(ckpt)


def eval_cmd(args: argparse.Namespace):
    config = load_config(EvalConfig, args.config, overrides(args, "suite", "n", "mode", "out"))
    write_resolved(config)
    report = evaluate(args.ckpt, config.suite, config.n, config.seed, config.mode, config.ode_steps, config.threads)
    write_json(report, config.out or Path(config.out_dir) / REPORT_FILE)
    print(report[config.suite])


def sample_cmd(args: argparse.Namespace):
    # Fail on an invalid prompt before loading anything
    parse_prompt(args.prompt)
    greedy = args.temperature is None
    generator = PipelineGenerator(
        load_bundle(args.ckpt), ode_steps=args.ode_steps, temperature=args.temperature or 1.0, greedy=greedy
    )
    save_ppm(generator.generate(args.prompt, args.seed), args.out)


def edit_cmd(args: argparse.Namespace):
    if args.image is None:
        raise UsageError("The `edit` command requires a reference image (--image)")
    if not Path(args.image).exists():
        raise UsageError(f"The reference image {args.image} doesn't exist")
    parse_instruction(args.instruction)
    image = load_ppm(args.image)
    generator = PipelineGenerator(load_bundle(args.ckpt), ode_steps=args.ode_steps)
    save_ppm(generator.edit(image, args.instruction, args.mode, args.seed), args.out)
    metadata = {"ckpt": args.ckpt, "image": args.image, "instruction": args.instruction, "mode": args.mode}
    write_json({**metadata, "seed": args.seed}, Path(args.out).with_suffix(".json"))


def pipeline_cmd(args: argparse.Namespace):
    config = load_config(PipelineConfig, args.config, overrides(args))
    ran = run_pipeline(config)
    print(f"Stages run : {ran if ran else 'none (every stage already completed)'}")


COMMANDS = {
    "gen-data": gen_data_cmd,
    "train-codec": train_codec_cmd,
    "pretrain": training_cmd,
    "sft": training_cmd,
    "rl": rl_cmd,
    "eval": eval_cmd,
    "sample": sample_cmd,
    "edit": edit_cmd,
    "pipeline": pipeline_cmd,
}


def run_command(args: argparse.Namespace):
    """Execute the command selected on the command line.

    Args:
        args (argparse.Namespace): Parsed arguments.
    """
    COMMANDS[args.cmd](args)


def format_error(e: BaseException, code: int) -> str:
    """One-line, machine-parsable description of a failure."""
    message = str(e).replace("\\", "\\\\").replace('"', '\\"').replace("\n", " ")
    return f'error code={code} type={type(e).__name__} message="{message}"'


def main(argv: Optional[List[str]] = None) -> int:
    """Run the command line and return its exit code.

    Args:
        argv (Optional[List[str]], optional): Arguments (defaults to
            `sys.argv[1:]`).

    Returns:
        Exit code : 0 on success, the code of the failure otherwise.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.cmd is None:
            raise UsageError("A command is required : " + ", ".join(COMMANDS))
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s"
        )
        run_command(args)
    except ArflowError as e:
        print(format_error(e, e.exit_code), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        print(format_error(e, EXIT_RUNTIME), file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cli():
    """Entry-point of the `arflow` command line."""
    sys.exit(main())
