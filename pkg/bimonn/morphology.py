# Copyright 2023 Viktor Karlquist <vkarlqui@gmail.com>
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#      http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Binary mathematical morphology.

Two implementations live here. :class:`BitImage` packs every row into 64-bit words and implements
dilation and erosion as OR / AND accumulations of shifted rows, one shift per structuring element
cell. The ``reference_*`` functions work on sets of coordinates, pixel by pixel, and serve as the
oracle the packed engine is checked against.

Conventions: ``dilate(x, S)(i) = 1`` iff some ``k`` in ``S`` has ``x(i - k) = 1`` and
``erode(x, S)(i) = 1`` iff every ``k`` in ``S`` has ``x(i - k) = 1``. Pixels outside the image are
0 in both cases, which is also the zero padding of the convolution in :mod:`bimonn.autodiff`.
"""

import re
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from bimonn import constants
from bimonn.constants import PointwiseOp

Coordinates = set[tuple[int, int]]


class MorphologyError(Exception):
    """Exception raised for errors in morphological operations."""

    def __init__(self, message: str):
        """Initialize MorphologyError class.

        Parameters
        ----------
        message : str
            Error message
        """
        self.message = message
        super().__init__(self.message)


class ImageShapeError(MorphologyError):
    """Exception raised when images that must be aligned have different shapes."""

    pass


class PbmFormatError(MorphologyError):
    """Exception raised when a PBM stream cannot be parsed."""

    pass


####################################################################################################
# Structuring elements
####################################################################################################


class StructuringElement:
    """Flat structuring element on an odd sized kernel centered at the origin."""

    __slots__ = ("mask",)

    def __init__(self, mask: np.ndarray):
        """Initialize StructuringElement class.

        Parameters
        ----------
        mask : np.ndarray
            Two dimensional membership mask with odd extents

        Raises
        ------
        MorphologyError
            If the mask is empty, not two dimensional or has an even extent
        """
        mask = np.array(mask, dtype=bool)
        if mask.ndim != 2 or mask.shape[0] % 2 == 0 or mask.shape[1] % 2 == 0:
            raise MorphologyError(f"Structuring element needs odd 2D extents, got {mask.shape}")
        if not mask.any():
            raise MorphologyError("Structuring element must not be empty")
        mask.flags.writeable = False
        self.mask = mask

    @classmethod
    def from_offsets(
        cls, offsets: Iterable[tuple[int, int]], shape: Optional[tuple[int, int]] = None
    ) -> "StructuringElement":
        """Build an element from (row, col) offsets relative to the kernel center."""
        offsets = list(offsets)
        if shape is None:
            reach_row = max((abs(row) for row, _ in offsets), default=0)
            reach_col = max((abs(col) for _, col in offsets), default=0)
            shape = (2 * reach_row + 1, 2 * reach_col + 1)
        mask = np.zeros(shape, dtype=bool)
        for row, col in offsets:
            mask[row + shape[0] // 2, col + shape[1] // 2] = True
        return cls(mask)

    @classmethod
    def from_bits(cls, bits: Sequence[int], shape: Sequence[int]) -> "StructuringElement":
        """Build an element from a row-major membership bit list."""
        return cls(np.asarray(bits, dtype=bool).reshape(tuple(shape)))

    @classmethod
    def origin(cls) -> "StructuringElement":
        """Single cell element, the identity of dilation and erosion."""
        return cls(np.ones((1, 1), dtype=bool))

    @classmethod
    def square(cls, size: int) -> "StructuringElement":
        """Full square of odd side ``size``."""
        return cls(np.ones((size, size), dtype=bool))

    @classmethod
    def cross(cls, size: int = 3) -> "StructuringElement":
        """Plus shaped element of odd side ``size``."""
        mask = np.zeros((size, size), dtype=bool)
        mask[size // 2, :] = True
        mask[:, size // 2] = True
        return cls(mask)

    @classmethod
    def line(cls, length: int, angle: int) -> "StructuringElement":
        """Centered segment of odd ``length``.

        Parameters
        ----------
        length : int
            Number of cells, odd
        angle : int
            0 (horizontal), 90 (vertical), -45 (top left to bottom right) or 45

        Returns
        -------
        StructuringElement
            The segment

        Raises
        ------
        MorphologyError
            If the length is even or the angle unsupported
        """
        if length % 2 == 0:
            raise MorphologyError(f"Line length must be odd, got {length}")
        steps = range(-(length // 2), length // 2 + 1)
        directions = {0: (0, 1), 90: (1, 0), -45: (1, 1), 45: (-1, 1)}
        if angle not in directions:
            raise MorphologyError(f"Unsupported line angle {angle}")
        d_row, d_col = directions[angle]
        return cls.from_offsets([(d_row * step, d_col * step) for step in steps])

    @property
    def shape(self) -> tuple[int, int]:
        """Kernel extents."""
        return self.mask.shape

    @property
    def size(self) -> int:
        """Number of member cells."""
        return int(self.mask.sum())

    def offsets(self) -> list[tuple[int, int]]:
        """Member cells as (row, col) offsets from the kernel center."""
        center_row, center_col = self.shape[0] // 2, self.shape[1] // 2
        cells = np.argwhere(self.mask)
        return [(int(row) - center_row, int(col) - center_col) for row, col in cells]

    def reflect(self) -> "StructuringElement":
        """Point reflection through the origin."""
        return StructuringElement(self.mask[::-1, ::-1])

    def bits(self) -> list[int]:
        """Row-major membership bits."""
        return [int(bit) for bit in self.mask.ravel()]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, StructuringElement):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.mask, other.mask))

    def __hash__(self) -> int:
        return hash((self.shape, self.mask.tobytes()))

    def __repr__(self) -> str:
        return f"StructuringElement(shape={self.shape}, offsets={self.offsets()})"


####################################################################################################
# Bit packed images
####################################################################################################


def _word_count(width: int) -> int:
    return -(-width // constants.WORD_BITS)


def _tail_mask(width: int) -> np.ndarray:
    """Per word mask of the bits that hold pixels."""
    mask = np.full(_word_count(width), np.iinfo(np.uint64).max, dtype=np.uint64)
    remainder = width % constants.WORD_BITS
    if remainder:
        mask[-1] = np.uint64((1 << remainder) - 1)
    return mask


class BitImage:
    """Binary raster with every row packed into 64-bit words.

    Column ``c`` of a row is bit ``c % 64`` of word ``c // 64``. Bits past the width are always
    zero. Images are treated as immutable.
    """

    __slots__ = ("height", "width", "words")

    def __init__(self, height: int, width: int, words: np.ndarray):
        if words.shape != (height, _word_count(width)):
            raise ImageShapeError(
                f"Word array {words.shape} does not fit a {height}x{width} image"
            )
        self.height = height
        self.width = width
        self.words = np.ascontiguousarray(words, dtype=np.uint64) & _tail_mask(width)

    @classmethod
    def from_array(cls, array: np.ndarray) -> "BitImage":
        """Pack a two dimensional array, nonzero entries become 1."""
        array = np.asarray(array) != 0
        if array.ndim != 2:
            raise ImageShapeError(f"Expected a 2D array, got shape {array.shape}")
        height, width = array.shape
        padded = np.zeros((height, _word_count(width) * constants.WORD_BITS), dtype=bool)
        padded[:, :width] = array
        packed = np.packbits(padded, axis=1, bitorder="little")
        words = np.ascontiguousarray(packed).view("<u8").astype(np.uint64)
        return cls(height, width, words.reshape(height, _word_count(width)))

    @classmethod
    def from_coordinates(
        cls, points: Iterable[tuple[int, int]], shape: tuple[int, int]
    ) -> "BitImage":
        """Build an image from the set of its foreground pixels."""
        array = np.zeros(shape, dtype=bool)
        for row, col in points:
            array[row, col] = True
        return cls.from_array(array)

    @classmethod
    def empty(cls, height: int, width: int) -> "BitImage":
        """All zero image."""
        return cls(height, width, np.zeros((height, _word_count(width)), dtype=np.uint64))

    @classmethod
    def full(cls, height: int, width: int) -> "BitImage":
        """All one image."""
        words = np.tile(_tail_mask(width), (height, 1))
        return cls(height, width, words)

    @property
    def shape(self) -> tuple[int, int]:
        """(height, width)."""
        return self.height, self.width

    def to_array(self) -> np.ndarray:
        """Unpack into a boolean array."""
        raw = np.ascontiguousarray(self.words.astype("<u8")).view(np.uint8)
        bits = np.unpackbits(raw.reshape(self.height, -1), axis=1, bitorder="little")
        return bits[:, : self.width].astype(bool)

    def coordinates(self) -> Coordinates:
        """Foreground pixels as a set of (row, col)."""
        return {(int(row), int(col)) for row, col in np.argwhere(self.to_array())}

    def count(self) -> int:
        """Number of foreground pixels."""
        raw = np.ascontiguousarray(self.words.astype("<u8")).view(np.uint8)
        return int(np.unpackbits(raw).sum())

    def padding_is_clear(self) -> bool:
        """Whether every bit past the width is zero."""
        return bool(np.all((self.words & ~_tail_mask(self.width)) == 0))

    def shifted(self, d_row: int, d_col: int) -> "BitImage":
        """Translate by (d_row, d_col): ``out(i) = self(i - d)``, zero filled."""
        words = np.zeros_like(self.words)
        if abs(d_row) < self.height:
            if d_row >= 0:
                words[d_row:] = self.words[: self.height - d_row]
            else:
                words[:d_row] = self.words[-d_row:]
        return BitImage(self.height, self.width, _shift_columns(words, d_col))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BitImage):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.words, other.words))

    def __hash__(self) -> int:
        return hash((self.shape, self.words.tobytes()))

    def __repr__(self) -> str:
        return f"BitImage({self.height}x{self.width}, count={self.count()})"


def _shift_columns(words: np.ndarray, shift: int) -> np.ndarray:
    """Move every row's content ``shift`` columns toward higher column indices."""
    if shift == 0:
        return words.copy()
    count = words.shape[1]
    out = np.zeros_like(words)
    whole, part = divmod(abs(shift), constants.WORD_BITS)
    if whole >= count:
        return out
    part_bits = np.uint64(part)
    carry_bits = np.uint64(constants.WORD_BITS - part)
    if shift > 0:
        # bits crossing a word boundary carry into the next word
        source = words[:, : count - whole]
        if part == 0:
            out[:, whole:] = source
        else:
            out[:, whole:] = source << part_bits
            out[:, whole + 1 :] |= source[:, :-1] >> carry_bits
    else:
        source = words[:, whole:]
        if part == 0:
            out[:, : count - whole] = source
        else:
            out[:, : count - whole] = source >> part_bits
            out[:, : count - whole - 1] |= source[:, 1:] << carry_bits
    return out


####################################################################################################
# Operations
####################################################################################################


def dilate(x: BitImage, s: StructuringElement) -> BitImage:
    """Dilation with zero padding: OR of the image shifted by every element offset."""
    words = np.zeros_like(x.words)
    for d_row, d_col in s.offsets():
        words |= x.shifted(d_row, d_col).words
    return BitImage(x.height, x.width, words)


def erode(x: BitImage, s: StructuringElement) -> BitImage:
    """Erosion with zero padding: AND of the image shifted by every element offset."""
    # padding bits past the width stay clear
    words = np.tile(_tail_mask(x.width), (x.height, 1))
    for d_row, d_col in s.offsets():
        words &= x.shifted(d_row, d_col).words
    return BitImage(x.height, x.width, words)


def opening(x: BitImage, s: StructuringElement) -> BitImage:
    """Erosion by ``s`` followed by dilation by its reflection."""
    return dilate(erode(x, s), s.reflect())


def pointwise(op: Union[PointwiseOp, str], images: Sequence[BitImage]) -> BitImage:
    """Pixelwise union, intersection or complement.

    Parameters
    ----------
    op : Union[PointwiseOp, str]
        Operation to apply
    images : Sequence[BitImage]
        Aligned operands, exactly one for the complement

    Returns
    -------
    BitImage
        Result with clear padding bits

    Raises
    ------
    ImageShapeError
        If the operands do not share a shape, or the arity is wrong
    """
    op = PointwiseOp(op)
    if not images:
        raise ImageShapeError(f"{op.value} needs at least one image")
    shape = images[0].shape
    if any(image.shape != shape for image in images):
        raise ImageShapeError(f"{op.value} of images with shapes {[i.shape for i in images]}")
    if op == PointwiseOp.COMPLEMENT:
        if len(images) != 1:
            raise ImageShapeError(f"Complement takes one image, got {len(images)}")
        return BitImage(shape[0], shape[1], ~images[0].words)
    words = images[0].words.copy()
    for image in images[1:]:
        if op == PointwiseOp.UNION:
            words |= image.words
        else:
            words &= image.words
    return BitImage(shape[0], shape[1], words)


def complement(x: BitImage) -> BitImage:
    """Pixelwise negation."""
    return pointwise(PointwiseOp.COMPLEMENT, [x])


####################################################################################################
# Reference implementation
####################################################################################################


def reference_dilate(
    points: Coordinates, s: StructuringElement, shape: tuple[int, int]
) -> Coordinates:
    """Dilation on a set of coordinates, one pixel at a time."""
    height, width = shape
    result = set()
    for row in range(height):
        for col in range(width):
            if any((row - d_row, col - d_col) in points for d_row, d_col in s.offsets()):
                result.add((row, col))
    return result


def reference_erode(
    points: Coordinates, s: StructuringElement, shape: tuple[int, int]
) -> Coordinates:
    """Erosion on a set of coordinates, one pixel at a time."""
    height, width = shape
    result = set()
    for row in range(height):
        for col in range(width):
            if all((row - d_row, col - d_col) in points for d_row, d_col in s.offsets()):
                result.add((row, col))
    return result


def reference_dilate_array(array: np.ndarray, s: StructuringElement) -> np.ndarray:
    """Per pixel boolean dilation of a 2D array."""
    height, width = array.shape
    offsets = s.offsets()
    out = np.zeros((height, width), dtype=bool)
    for row in range(height):
        for col in range(width):
            for d_row, d_col in offsets:
                src_row, src_col = row - d_row, col - d_col
                if 0 <= src_row < height and 0 <= src_col < width and array[src_row, src_col]:
                    out[row, col] = True
                    break
    return out


def oracle_equal(a: BitImage, b: Iterable[tuple[int, int]]) -> bool:
    """Whether a packed image holds exactly the given foreground pixels."""
    return a.coordinates() == set(b)


####################################################################################################
# PBM
####################################################################################################

_PBM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def to_pbm_bytes(image: BitImage) -> bytes:
    """Encode as a binary (P4) PBM, 1 bits are foreground."""
    header = f"P4\n{image.width} {image.height}\n".encode("ascii")
    data = np.packbits(image.to_array(), axis=1, bitorder="big")
    return header + data.tobytes()


def from_pbm_bytes(data: bytes) -> BitImage:
    """Decode a binary (P4) PBM.

    Raises
    ------
    PbmFormatError
        If the magic number, header or pixel data are invalid
    """
    tokens = []
    position = 0
    for _ in range(3):
        match = _PBM_TOKEN.match(data, position)
        if match is None:
            raise PbmFormatError("Truncated PBM header")
        tokens.append(match.group(1))
        position = match.end()
    if tokens[0] != b"P4":
        raise PbmFormatError(f"Unsupported PBM magic {tokens[0]!r}")
    try:
        width, height = int(tokens[1]), int(tokens[2])
    except ValueError as err:
        raise PbmFormatError(f"Invalid PBM size {tokens[1]!r} {tokens[2]!r}") from err
    if position >= len(data) or not data[position : position + 1].isspace():
        raise PbmFormatError("Missing whitespace after PBM header")
    position += 1
    row_bytes = -(-width // 8)
    payload = data[position : position + row_bytes * height]
    if len(payload) != row_bytes * height:
        raise PbmFormatError(f"PBM payload has {len(payload)} bytes, expected {row_bytes * height}")
    rows = np.frombuffer(payload, dtype=np.uint8).reshape(height, row_bytes)
    bits = np.unpackbits(rows, axis=1, bitorder="big")[:, :width]
    return BitImage.from_array(bits)


def write_pbm(image: BitImage, path: Union[str, Path]) -> None:
    """Write an image as a P4 PBM file."""
    Path(path).write_bytes(to_pbm_bytes(image))


def read_pbm(path: Union[str, Path]) -> BitImage:
    """Read a P4 PBM file."""
    return from_pbm_bytes(Path(path).read_bytes())
