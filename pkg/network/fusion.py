from enum import Enum

from autodiff.tensor import ShapeError, Tensor, concat
from network.attention import AggregatedMask


class FusionKind(Enum):
    F1 = 'F1'
    F2 = 'F2'
    F3 = 'F3'
    F4 = 'F4'
    F5 = 'F5'

    @classmethod
    def parse(cls, value) -> 'FusionKind':
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"Schéma de fusion non supporté: {value}") from None

    def out_channels(self, image_channels: int, embed_channels: int) -> int:
        """Nombre de canaux de l'entrée de l'étage suivant"""
        return {
            FusionKind.F1: embed_channels,
            FusionKind.F2: image_channels,
            FusionKind.F3: 2 * image_channels,
            FusionKind.F4: 2 * image_channels + embed_channels,
            FusionKind.F5: 2 * image_channels + 2 * embed_channels,
        }[self]


def fuse(kind: FusionKind, image: Tensor, embedding: Tensor, mask: AggregatedMask) -> Tensor:
    """Construit l'entrée de l'étage suivant à partir de l'image, de l'embedding et du masque

    F1 = H ; F2 = I*M ; F3 = I | I*M ; F4 = I | I*M | H*M ; F5 = I | I*M | H | H*M
    (| concaténation sur les canaux, * produit terme à terme, M diffusé sur les canaux)
    """
    kind = FusionKind.parse(kind)
    m = mask.mask if isinstance(mask, AggregatedMask) else mask
    if m.ndim != 4 or m.shape[1] != 1:
        raise ShapeError('fuse', f"masque (N, 1, Y, X) attendu, reçu {m.shape}")
    for name, tensor in (('image', image), ('embedding', embedding)):
        if tensor.ndim != 4 or tensor.shape[0] != m.shape[0] or tensor.shape[2:] != m.shape[2:]:
            raise ShapeError('fuse', f"{name} {tensor.shape} incompatible avec le masque "
                                     f"{m.shape}")

    if kind is FusionKind.F1:
        return embedding
    masked_image = image * m
    if kind is FusionKind.F2:
        return masked_image
    if kind is FusionKind.F3:
        return concat([image, masked_image], axis=1)
    masked_embedding = embedding * m
    if kind is FusionKind.F4:
        return concat([image, masked_image, masked_embedding], axis=1)
    return concat([image, masked_image, embedding, masked_embedding], axis=1)
