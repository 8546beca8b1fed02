"""Module containing the base Generator class, and the generator running the
full pipeline (AR tokens → hidden states → flow ODE → VAE decoder).
"""

from typing import Optional

import numpy as np

from arflow.arlm import sample_tokens
from arflow.checkpoint import Bundle
from arflow.dit import ConditioningMode, build_condition, euler_sample
from arflow.errors import DataError, UntrainedError
from arflow.grammar import parse_instruction
from arflow.render import IMAGE_SIZE
from arflow.utils import derive_seed


class Generator:
    """Base class for Generator, which is the component being evaluated.

    Child classes should overwrite `generate()` and `edit()`.

    By default, the implementation of these methods is dummy : `generate()`
    returns an empty (black) image and `edit()` returns the reference image
    unchanged.
    """

    def generate(self, prompt: str, seed: int) -> np.ndarray:
        """Method used for text-to-image generation.

        Args:
            prompt (str): Prompt of the grammar.
            seed (int): Seed of the generation.

        Returns:
            Image of shape (32, 32, 3), values in [0, 1].
        """
        return np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)

    def edit(self, image: np.ndarray, instruction: str, mode: str, seed: int) -> np.ndarray:
        """Method used for image editing.

        Args:
            image (np.ndarray): Reference image of shape (32, 32, 3).
            instruction (str): Instruction of the grammar.
            mode (str): Conditioning mode of the diffusion model.
            seed (int): Seed of the generation.

        Returns:
            Edited image of shape (32, 32, 3).
        """
        return image.copy()


class PipelineGenerator(Generator):
    """Generator using the trained models of a checkpoint.

    Args:
        bundle (Bundle): Trained models and codecs.
        ode_steps (int, optional): Number of Euler steps of the flow ODE.
        temperature (float, optional): Sampling temperature of the AR model.
        greedy (bool, optional): Pick the most likely image tokens instead of
            sampling them.
    """

    def __init__(self, bundle: Bundle, ode_steps: int = 20, temperature: float = 1.0, greedy: bool = True):
        if bundle.ar is None or bundle.dit is None:
            raise UntrainedError("The checkpoint doesn't contain the generation models")
        self.bundle = bundle
        self.codec = bundle.codec
        self.ode_steps = ode_steps
        self.temperature = temperature
        self.greedy = greedy

    def _decode(self, hidden: np.ndarray, ref_latent: Optional[np.ndarray], mode: ConditioningMode, seed: int):
        dit = self.bundle.dit
        cond = build_condition(dit, hidden[None], None if ref_latent is None else ref_latent[None], mode)
        latent = euler_sample(dit, cond, self.ode_steps, derive_seed(seed, 1), channels=dit.config.latent_channels)
        return self.codec.images(latent)[0]

    def generate(self, prompt: str, seed: int) -> np.ndarray:
        """Generate an image from a prompt.

        Raises:
            GrammarError: If the prompt uses words outside of the grammar.
        """
        ar_seed = derive_seed(seed, 0)
        sample = sample_tokens(self.bundle.ar, prompt, None, self.temperature, ar_seed, greedy=self.greedy)
        return self._decode(sample.hidden, None, ConditioningMode.NONE, seed)

    def edit(self, image: np.ndarray, instruction: str, mode: str, seed: int) -> np.ndarray:
        """Edit an image following an instruction.

        Raises:
            DataError: If the image doesn't have the expected size.
            GrammarError: If the instruction is outside of the grammar.
        """
        if image.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
            raise DataError(f"The reference image should be {IMAGE_SIZE}x{IMAGE_SIZE} RGB (got shape {image.shape})")
        parse_instruction(instruction)
        mode = ConditioningMode(mode)

        ref_tokens = self.codec.tokens(image)
        ref_latent = self.codec.latents(image)
        sample = sample_tokens(
            self.bundle.ar, instruction, ref_tokens, self.temperature, derive_seed(seed, 0), greedy=self.greedy
        )
        return self._decode(sample.hidden, None if mode == ConditioningMode.NONE else ref_latent, mode, seed)
