"""
Configurable N-block U-Net.

Contracting path: ``n_blocks`` blocks of two 3x3 convolutions followed by a 2x2
max-pool; channels double with depth (F0, 2F0, ...). Expansive path: ``n_blocks``
blocks of two 3x3 convolutions followed by a 2x2 stride-2 deconvolution, the first
one working at the bottleneck and the rest on the concatenation of the upsampled
features with the matching contracting block. A final block of two 3x3 convolutions
and a 1x1 projection yields N+1 logits. Padding keeps every block's spatial size, so
skips need no cropping.
"""
import json
import os
from typing import Any
from typing import Dict
from typing import List
from typing import Optional
from typing import Tuple
from typing import Union

import numpy as np
import torch
from torch import nn

from markerseg.core_types import LogitCube
from markerseg.core_types import NormalizedImage
from markerseg.core_types import ProbabilityCube
from markerseg.core_types import SegMap
from markerseg.core_types import segmap_from_probabilities
from markerseg.losses import softmax_pixelwise
from markerseg.utils.default_logger import logger
from markerseg.utils.exceptions import ArtifactIOError
from markerseg.utils.exceptions import ConfigError
from markerseg.utils.exceptions import ShapeError
from markerseg.utils.file_utils import ensure_dir
from markerseg.utils.file_utils import io_retry
from markerseg.utils.models.data_models import TrainingStage
from markerseg.utils.models.settings_model import ModelConfig

model_logger = logger.bind(module='UNetModel')

CHECKPOINT_FORMAT_VERSION = 1


class DoubleConv(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, drop_probability: float):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=1, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, kernel_size=3, stride=1, padding=1),
            nn.ReLU(inplace=True),
            nn.Dropout(p=drop_probability),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


class UNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        f0 = cfg.base_channels
        drop = cfg.drop_probability
        self.n_blocks = cfg.n_blocks

        self.down = nn.ModuleList()
        in_channels = cfg.in_channels
        for level in range(cfg.n_blocks):
            self.down.append(DoubleConv(in_channels, f0 * 2 ** level, drop))
            in_channels = f0 * 2 ** level
        self.pool = nn.MaxPool2d(kernel_size=2, stride=2)

        self.up_convs = nn.ModuleList()
        self.up_samples = nn.ModuleList()
        for level in range(cfg.n_blocks, 0, -1):
            channels = f0 * 2 ** level
            # the bottleneck block sees pooled features, the others a skip concatenation
            block_in = channels // 2 if level == cfg.n_blocks else 2 * channels
            self.up_convs.append(DoubleConv(block_in, channels, drop))
            self.up_samples.append(nn.ConvTranspose2d(channels, channels // 2, kernel_size=2, stride=2))

        self.final = DoubleConv(2 * f0, f0, drop)
        self.project = nn.Conv2d(f0, cfg.n_classes, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        for index, (block, upsample) in enumerate(zip(self.up_convs, self.up_samples)):
            if index > 0:
                x = torch.cat([skips[-index], x], dim=1)
            x = upsample(block(x))
        x = torch.cat([skips[0], x], dim=1)
        return self.project(self.final(x))


def check_model_config(cfg: ModelConfig) -> None:
    divisor = 2 ** cfg.n_blocks
    if cfg.width % divisor or cfg.height % divisor:
        raise ConfigError(
            'input size must be divisible by 2^n_blocks',
            {'width': cfg.width, 'height': cfg.height, 'n_blocks': cfg.n_blocks},
        )


def init_parameters(network: nn.Module, cfg: ModelConfig, seed: int) -> None:
    """Truncated-normal weights and constant biases, drawn from a private RNG stream."""
    init = cfg.init
    low = init.mean - init.truncation * init.std
    high = init.mean + init.truncation * init.std
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        with torch.no_grad():
            for module in network.modules():
                if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
                    nn.init.trunc_normal_(module.weight, mean=init.mean, std=init.std, a=low, b=high)
                    nn.init.constant_(module.bias, init.bias)


class Model:
    """A U-Net together with the configuration and seed it was built from."""

    def __init__(self, config: ModelConfig, seed: int, network: UNet):
        self.config = config
        self.seed = seed
        self.network = network
        self.device = torch.device(config.device)

    def _input_tensor(self, img: Union[NormalizedImage, np.ndarray]) -> torch.Tensor:
        pixels = img.pixels if isinstance(img, NormalizedImage) else np.asarray(img, dtype=np.float64)
        if pixels.shape != (self.config.height, self.config.width):
            raise ShapeError(
                'image size does not match the model input size',
                {'image': list(pixels.shape), 'model': [self.config.height, self.config.width]},
            )
        return torch.from_numpy(pixels.astype(np.float32))[None, None].to(self.device)

    def logits_tensor(self, batch: torch.Tensor, train_mode: bool = False) -> torch.Tensor:
        self.network.train(train_mode)
        return self.network(batch.to(self.device))

    def forward(self, img: Union[NormalizedImage, np.ndarray], train_mode: bool = False) -> LogitCube:
        """
        Logits for one image as a ``(H, W, N+1)`` cube.

        Dropout is active only with `train_mode`; inference is deterministic.

        Raises:
            ShapeError: If the image size differs from the configured input size.
        """
        x = self._input_tensor(img)
        with torch.set_grad_enabled(train_mode):
            out = self.logits_tensor(x, train_mode)
        return LogitCube(layers=out[0].detach().permute(1, 2, 0).cpu().numpy().astype(np.float64))

    def predict(self, img: Union[NormalizedImage, np.ndarray]) -> Tuple[ProbabilityCube, SegMap]:
        probabilities = softmax_pixelwise(self.forward(img, train_mode=False))
        return probabilities, segmap_from_probabilities(probabilities)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.network.parameters())


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    """
    Builds and initializes a U-Net.

    Raises:
        ConfigError: If the input size is not divisible by ``2 ** n_blocks``.
    """
    check_model_config(cfg)
    network = UNet(cfg)
    init_parameters(network, cfg, seed)
    model = Model(cfg, seed, network.to(torch.device(cfg.device)))
    model_logger.debug(
        'Built {}-block U-Net (F0={}, {} parameters)', cfg.n_blocks, cfg.base_channels, model.parameter_count(),
    )
    return model


def _conv(in_channels: int, out_channels: int, kernel: int) -> int:
    return in_channels * out_channels * kernel * kernel + out_channels


def param_count(cfg: ModelConfig) -> int:
    """Closed-form number of weights and biases of ``build_model(cfg)``."""
    f0 = cfg.base_channels
    total = 0
    in_channels = cfg.in_channels
    for level in range(cfg.n_blocks):
        channels = f0 * 2 ** level
        total += _conv(in_channels, channels, 3) + _conv(channels, channels, 3)
        in_channels = channels
    for level in range(cfg.n_blocks, 0, -1):
        channels = f0 * 2 ** level
        block_in = channels // 2 if level == cfg.n_blocks else 2 * channels
        total += _conv(block_in, channels, 3) + _conv(channels, channels, 3)
        total += _conv(channels, channels // 2, 2)
    total += _conv(2 * f0, f0, 3) + _conv(f0, f0, 3)
    total += _conv(f0, cfg.n_classes, 1)
    return total


def contracting_channels(model: Model) -> List[int]:
    """Output channels of each contracting block followed by the bottleneck width."""
    widths = [block.layers[0].out_channels for block in model.network.down]
    return widths + [model.network.up_convs[0].layers[0].out_channels]


@io_retry
def _torch_save(payload: Dict[str, Any], path: str) -> None:
    torch.save(payload, path)


@io_retry
def _torch_load(path: str) -> Dict[str, Any]:
    return torch.load(path, map_location='cpu', weights_only=True)


def save_checkpoint(
    path: str,
    model: Model,
    stage: TrainingStage,
    optimizer_state: Optional[Dict[str, Any]] = None,
    trainer_state: Optional[Dict[str, Any]] = None,
) -> str:
    """
    Writes a self-describing checkpoint: format version, model config, seed, stage tag,
    parameters, and optionally optimizer and trainer progress for resuming.

    Raises:
        ArtifactIOError: If the file cannot be written.
    """
    payload = {
        'format_version': CHECKPOINT_FORMAT_VERSION,
        'config': json.loads(model.config.json()),
        'seed': model.seed,
        'stage': stage.value,
        'state_dict': {k: v.detach().cpu() for k, v in model.network.state_dict().items()},
        'optimizer': optimizer_state,
        'trainer_state': trainer_state,
    }
    try:
        ensure_dir(os.path.dirname(path))
        _torch_save(payload, path)
    except Exception as exc:
        model_logger.opt(exception=True).error('Unable to write checkpoint {}', path)
        raise ArtifactIOError(path, exc) from exc
    return path


def load_checkpoint(path: str, device: Optional[str] = None) -> Tuple[Model, Dict[str, Any]]:
    """
    Restores a model from ``save_checkpoint`` output.

    Returns:
        Tuple[Model, Dict[str, Any]]: The model and the raw checkpoint payload
            (stage, optimizer and trainer state).

    Raises:
        ArtifactIOError: If the file cannot be read.
        ConfigError: If the checkpoint format version is unknown.
    """
    try:
        payload = _torch_load(path)
    except Exception as exc:
        raise ArtifactIOError(path, exc) from exc
    if payload.get('format_version') != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(
            'unsupported checkpoint format', {'path': path, 'format_version': payload.get('format_version')},
        )
    config = ModelConfig.parse_obj(payload['config'])
    if device is not None:
        config = config.copy(update={'device': device})
    check_model_config(config)
    network = UNet(config)
    network.load_state_dict(payload['state_dict'])
    return Model(config, payload['seed'], network.to(torch.device(config.device))), payload
