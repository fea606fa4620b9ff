"""Viewer annotation XML: parse, serialize, and the layer-to-class map.

The XML schema is the hierarchical region format emitted by WSI viewers:

    <Annotations MicronsPerPixel="0.25">
      <Annotation Id="1" Name="glom" LineColor="65280">
        <Regions>
          <Region Id="1" NegativeROA="0">
            <Vertices>
              <Vertex X="12.5" Y="30"/>

LineColor encodes RGB as R + 256*G + 65536*B. Parsing preserves layer,
region and vertex order and keeps coordinates as reals; quantization only
happens at rasterization time. Unmodeled display attributes are dropped on
roundtrip. Which layer means which mask class is deliberately NOT in the
XML: it lives in a project-level ClassMap.
"""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

DEFAULT_LINE_COLOR = (0, 255, 0)


class AnnotationParseError(Exception):
    """Malformed annotation XML; message carries the offending element path."""


@dataclass
class Region:
    id: int
    negative: bool
    vertices: list[tuple[float, float]]


@dataclass
class AnnotationLayer:
    id: int
    name: str | None
    line_color: tuple[int, int, int]
    regions: list[Region] = field(default_factory=list)


@dataclass
class AnnotationDocument:
    microns_per_pixel: float | None = None
    layers: list[AnnotationLayer] = field(default_factory=list)

    def layer_by_id(self, layer_id: int) -> AnnotationLayer | None:
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        return None


def color_to_int(rgb: tuple[int, int, int]) -> int:
    r, g, b = rgb
    return r + 256 * g + 65536 * b


def color_from_int(value: int) -> tuple[int, int, int]:
    return (value & 0xFF, (value >> 8) & 0xFF, (value >> 16) & 0xFF)


def _fmt(value: float) -> str:
    """Render a real so that float(text) reproduces it exactly; integral
    values drop the trailing '.0' to keep files tidy."""
    f = float(value)
    if f.is_integer() and abs(f) < 1e15:
        return str(int(f))
    return repr(f)


def _attr(elem: ET.Element, name: str, path: str) -> str:
    value = elem.get(name)
    if value is None:
        raise AnnotationParseError(f"{path}: missing required attribute {name!r}")
    return value


def _int_attr(elem: ET.Element, name: str, path: str) -> int:
    raw = _attr(elem, name, path)
    try:
        return int(raw)
    except ValueError as exc:
        raise AnnotationParseError(
            f"{path}: attribute {name}={raw!r} is not an integer") from exc


def _float_attr(elem: ET.Element, name: str, path: str) -> float:
    raw = _attr(elem, name, path)
    try:
        return float(raw)
    except ValueError as exc:
        raise AnnotationParseError(
            f"{path}: attribute {name}={raw!r} is not numeric") from exc


def parse_annotations(text: str) -> AnnotationDocument:
    """Parse annotation XML into a document, preserving order and exact
    coordinate values. Errors name the offending element path."""
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise AnnotationParseError(f"malformed XML: {exc}") from exc
    if root.tag != "Annotations":
        raise AnnotationParseError(f"expected <Annotations> root, got <{root.tag}>")

    mpp = None
    if root.get("MicronsPerPixel") is not None:
        mpp = _float_attr(root, "MicronsPerPixel", "Annotations")

    doc = AnnotationDocument(microns_per_pixel=mpp)
    seen_layers: set[int] = set()
    for i, ann in enumerate(root.findall("Annotation"), start=1):
        apath = f"Annotations/Annotation[{i}]"
        layer_id = _int_attr(ann, "Id", apath)
        if layer_id in seen_layers:
            raise AnnotationParseError(f"{apath}: duplicate layer Id {layer_id}")
        seen_layers.add(layer_id)
        color = DEFAULT_LINE_COLOR
        if ann.get("LineColor") is not None:
            color = color_from_int(_int_attr(ann, "LineColor", apath))
        layer = AnnotationLayer(id=layer_id, name=ann.get("Name"), line_color=color)

        regions_elem = ann.find("Regions")
        region_elems = [] if regions_elem is None else regions_elem.findall("Region")
        seen_regions: set[int] = set()
        for j, reg in enumerate(region_elems, start=1):
            rpath = f"{apath}/Regions/Region[{j}]"
            region_id = _int_attr(reg, "Id", rpath)
            if region_id in seen_regions:
                raise AnnotationParseError(f"{rpath}: duplicate region Id {region_id}")
            seen_regions.add(region_id)
            negative = reg.get("NegativeROA", "0").strip() in ("1", "true", "True")
            vertices_elem = reg.find("Vertices")
            vertex_elems = [] if vertices_elem is None else vertices_elem.findall("Vertex")
            vertices = []
            for k, vert in enumerate(vertex_elems, start=1):
                vpath = f"{rpath}/Vertices/Vertex[{k}]"
                vertices.append((_float_attr(vert, "X", vpath),
                                 _float_attr(vert, "Y", vpath)))
            layer.regions.append(Region(id=region_id, negative=negative,
                                        vertices=vertices))
        doc.layers.append(layer)
    return doc


def serialize_annotations(doc: AnnotationDocument) -> str:
    """Serialize a document to XML text. parse(serialize(d)) == d for valid
    documents; the attribute set and nesting are pinned by golden fixtures."""
    root = ET.Element("Annotations")
    if doc.microns_per_pixel is not None:
        root.set("MicronsPerPixel", _fmt(doc.microns_per_pixel))
    for layer in doc.layers:
        ann = ET.SubElement(root, "Annotation")
        ann.set("Id", str(layer.id))
        if layer.name is not None:
            ann.set("Name", layer.name)
        ann.set("LineColor", str(color_to_int(layer.line_color)))
        regions = ET.SubElement(ann, "Regions")
        for region in layer.regions:
            reg = ET.SubElement(regions, "Region")
            reg.set("Id", str(region.id))
            reg.set("NegativeROA", "1" if region.negative else "0")
            vertices = ET.SubElement(reg, "Vertices")
            for x, y in region.vertices:
                vert = ET.SubElement(vertices, "Vertex")
                vert.set("X", _fmt(x))
                vert.set("Y", _fmt(y))
    ET.indent(root, space="  ")
    return ET.tostring(root, encoding="unicode") + "\n"


def documents_equal(a: AnnotationDocument, b: AnnotationDocument) -> bool:
    """Structural equality: same layer/region/vertex structure and values."""
    if (a.microns_per_pixel is None) != (b.microns_per_pixel is None):
        return False
    if a.microns_per_pixel is not None and a.microns_per_pixel != b.microns_per_pixel:
        return False
    if len(a.layers) != len(b.layers):
        return False
    for la, lb in zip(a.layers, b.layers):
        if (la.id, la.name, la.line_color) != (lb.id, lb.name, lb.line_color):
            return False
        if len(la.regions) != len(lb.regions):
            return False
        for ra, rb in zip(la.regions, lb.regions):
            if (ra.id, ra.negative) != (rb.id, rb.negative):
                return False
            if ra.vertices != rb.vertices:
                return False
    return True


# ---------------------------------------------------------------------------
# ClassMap: explicit layer-id <-> mask-class bindings
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassBinding:
    layer_id: int
    class_index: int
    color: tuple[int, int, int]
    name: str | None = None


@dataclass
class ClassMap:
    """Project-level mapping between annotation layers and mask class
    indices. Class 0 is implicitly background and cannot be bound."""

    bindings: list[ClassBinding]

    def __post_init__(self) -> None:
        layers = [b.layer_id for b in self.bindings]
        classes = [b.class_index for b in self.bindings]
        if len(set(layers)) != len(layers):
            raise ValueError("duplicate layer id in class map")
        if len(set(classes)) != len(classes):
            raise ValueError("duplicate class index in class map")
        if any(c < 1 for c in classes):
            raise ValueError("class 0 is reserved for background")

    @property
    def n_classes(self) -> int:
        """Class count including background."""
        return max((b.class_index for b in self.bindings), default=0) + 1

    def class_for_layer(self, layer_id: int) -> int | None:
        for b in self.bindings:
            if b.layer_id == layer_id:
                return b.class_index
        return None

    def binding_for_class(self, class_index: int) -> ClassBinding | None:
        for b in self.bindings:
            if b.class_index == class_index:
                return b
        return None

    def to_json(self) -> str:
        payload = {"classes": [
            {"layer_id": b.layer_id, "class_index": b.class_index,
             "color": list(b.color), **({"name": b.name} if b.name else {})}
            for b in self.bindings]}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ClassMap":
        payload = json.loads(text)
        bindings = [ClassBinding(layer_id=int(c["layer_id"]),
                                 class_index=int(c["class_index"]),
                                 color=tuple(int(v) for v in c["color"]),
                                 name=c.get("name"))
                    for c in payload["classes"]]
        return cls(bindings=bindings)

    @classmethod
    def load(cls, path: str | Path) -> "ClassMap":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")
