"""Reduced-scale ("desk") training recipe shared by the acceptance suite and the CLI.

Artifacts live under ``<root>/<recipe digest>/`` so a changed recipe never
reuses stale checkpoints:

* ``dataset.bin``: the 2-body training simulations;
* ``diffusion/last.ckpt``: the window denoiser;
* ``surrogate-<variant>/last.ckpt``: forward surrogates for the baselines.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .baselines import SurrogateModel, SurrogateTrainConfig, default_backbone, train_surrogate
from .denoiser import DenoiserConfig
from .diffusion import DiffusionModel, TrainConfig, extract_windows, train
from .sim import SimConfig, generate_dataset, generate_trajectories

log = logging.getLogger(__name__)


def _denoiser() -> DenoiserConfig:
    return DenoiserConfig(base_width=32, channel_factors=(1, 2, 2), blocks_per_level=1)


def _train() -> TrainConfig:
    return TrainConfig(total_steps=20_000, lr=1e-3, lr_decay_start=10_000, lr_decay_every=2_500,
                       log_every=500, checkpoint_every=5_000)


@dataclass
class DeskRecipe:
    n_sims: int = 200
    sim: SimConfig = field(default_factory=lambda: SimConfig(n_bodies=2, seed=0))
    denoiser: DenoiserConfig = field(default_factory=_denoiser)
    train: TrainConfig = field(default_factory=_train)
    surrogate: SurrogateTrainConfig = field(default_factory=lambda: SurrogateTrainConfig(total_steps=5_000))
    variants: tuple[str, ...] = ("23-step",)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class DeskArtifacts:
    root: Path
    dataset: Path
    diffusion: Path
    surrogates: dict

    def load_diffusion(self) -> DiffusionModel:
        return DiffusionModel.load(self.diffusion)

    def load_surrogate(self, variant: str = "23-step") -> SurrogateModel:
        return SurrogateModel.load(self.surrogates[variant])


def desk_paths(root, recipe: DeskRecipe | None = None) -> DeskArtifacts:
    recipe = recipe or DeskRecipe()
    d = Path(root) / recipe.digest()
    return DeskArtifacts(d, d / "dataset.bin", d / "diffusion" / "last.ckpt",
                         {v: d / f"surrogate-{v}" / "last.ckpt" for v in recipe.variants})


def ensure_desk(root, recipe: DeskRecipe | None = None, train_missing: bool = True) -> DeskArtifacts:
    """Return the recipe's artifacts, training whatever is missing.

    Training reads the simulations in double precision straight from the
    generator; ``dataset.bin`` is the single-precision copy for the CLI.
    With ``train_missing=False`` a missing artifact raises ``FileNotFoundError``.
    """
    recipe = recipe or DeskRecipe()
    art = desk_paths(root, recipe)
    todo = [p for p in [art.diffusion, *art.surrogates.values()] if not p.exists()]
    if todo and not train_missing:
        raise FileNotFoundError(f"desk artifacts missing: {', '.join(map(str, todo))}")
    art.root.mkdir(parents=True, exist_ok=True)
    (art.root / "recipe.json").write_text(json.dumps(asdict(recipe), indent=2, sort_keys=True, default=list))
    if not art.dataset.exists():
        generate_dataset(recipe.sim, recipe.n_sims, art.dataset)
    if not todo:
        return art
    data = generate_trajectories(recipe.sim, recipe.n_sims)
    if not art.diffusion.exists():
        log.info("training desk diffusion model (%d steps)", recipe.train.total_steps)
        model = DiffusionModel(recipe.denoiser)
        train(model, extract_windows(data, recipe.denoiser.window_len), recipe.train,
              out_dir=art.diffusion.parent,
              progress=lambda s, l, t: log.info("diffusion step %d loss %.4f (%.0fs)", s, l, t))
    for variant, path in art.surrogates.items():
        if not path.exists():
            log.info("training desk %s surrogate (%d steps)", variant, recipe.surrogate.total_steps)
            train_surrogate(variant, data, recipe.surrogate, default_backbone(variant, recipe.sim.n_bodies),
                            out_dir=path.parent, progress=lambda s, l: log.info("surrogate step %d loss %.5f", s, l))
    return art
