"""
Real CLIP backbone through transformers. Optional: the package and the
weights are only needed when backend "real" is selected.
"""

from pathlib import Path
from typing import Sequence, Union

import torch

from backbone.common import Backbone, BackboneSpec, PatchFeatureSet, tensor_checksum
from utils.errors import BackendUnavailableException, InvalidArgumentException
from utils.logging import get_logger
from utils.resilience import retry_io

logger = get_logger("backbone.clip")


class ClipBackbone(Backbone):
    def __init__(self, model_dir: Union[str, Path], dtype: torch.dtype = torch.float32):
        try:
            from transformers import CLIPImageProcessor, CLIPModel, CLIPTokenizer
        except ImportError as e:
            raise BackendUnavailableException(
                "clip", "transformers not installed. Run: pip install transformers>=4.40", e
            )

        model_dir = Path(model_dir)
        if not model_dir.exists():
            raise BackendUnavailableException("clip", f"weights not found at {model_dir}")

        try:
            self.model = self._load(CLIPModel, model_dir).to(dtype).eval()
            self.tokenizer = self._load(CLIPTokenizer, model_dir)
            self.processor = self._load(CLIPImageProcessor, model_dir)
        except OSError as e:
            raise BackendUnavailableException("clip", f"failed to load weights from {model_dir}", e)

        for param in self.model.parameters():
            param.requires_grad_(False)

        vision = self.model.config.vision_config
        n_patches = (vision.image_size // vision.patch_size) ** 2
        self.spec = BackboneSpec(
            dim=self.model.config.projection_dim,
            vision_dim=vision.hidden_size,
            n_patches=n_patches,
            vocab_size=self.tokenizer.vocab_size,
            max_text_len=self.model.config.text_config.max_position_embeddings,
            name=f"clip:{model_dir.name}",
        )
        self.projection = self.model.visual_projection.weight.detach().T.contiguous()
        logger.info(f"Loaded CLIP backbone from {model_dir} (D={self.spec.dim}, N_p={n_patches})")

    @staticmethod
    @retry_io
    def _load(cls, model_dir: Path):
        return cls.from_pretrained(str(model_dir))

    def tokenize(self, text: str) -> list:
        # Text features pool at eos, so truncation must keep it as the last id
        return self.tokenizer(text, truncation=True, max_length=self.spec.max_text_len)["input_ids"]

    def _text_features(self, ids: Sequence[int]) -> torch.Tensor:
        input_ids = torch.tensor([list(ids)], dtype=torch.long)
        return self.model.get_text_features(input_ids=input_ids)[0].to(self.dtype)

    def _image_features(self, image) -> PatchFeatureSet:
        if torch.is_tensor(image):
            pixel_values = image if image.dim() == 4 else image[None]
        else:
            pixel_values = self.processor(images=image, return_tensors="pt")["pixel_values"]

        outputs = self.model.vision_model(
            pixel_values=pixel_values.to(self.dtype), output_attentions=True
        )
        tokens = self.model.vision_model.post_layernorm(outputs.last_hidden_state[0])
        attention = outputs.attentions[-1][0].mean(dim=0)
        return PatchFeatureSet(tokens=tokens, attention=attention)

    def load_image(self, path: Union[str, Path]):
        try:
            from PIL import Image
        except ImportError as e:
            raise BackendUnavailableException("clip", "Pillow not installed. Run: pip install Pillow", e)
        path = Path(path)
        if not path.exists():
            raise InvalidArgumentException(f"Image not found: {path}")
        with Image.open(path) as img:
            return img.convert("RGB")

    def weights_checksum(self) -> str:
        return tensor_checksum(*(p for _, p in sorted(self.model.state_dict().items())))
