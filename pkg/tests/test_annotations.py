import numpy as np
import pytest

from slideloop.annotations import (AnnotationDocument, AnnotationLayer,
                                   AnnotationParseError, ClassBinding, ClassMap,
                                   Region, color_from_int, color_to_int,
                                   documents_equal, parse_annotations,
                                   serialize_annotations)

MINIMAL = """
<Annotations>
  <Annotation Id="1" LineColor="65280">
    <Regions>
      <Region Id="1" NegativeROA="0">
        <Vertices>
          <Vertex X="1.5" Y="2"/>
          <Vertex X="10" Y="2"/>
          <Vertex X="10" Y="12.25"/>
        </Vertices>
      </Region>
    </Regions>
  </Annotation>
</Annotations>
"""

# Pinned golden fixture: the exact serialized form of the document built in
# golden_document(). Byte-level changes to the emitter are breaking changes.
GOLDEN = """<Annotations MicronsPerPixel="0.25">
  <Annotation Id="1" Name="glom" LineColor="65280">
    <Regions>
      <Region Id="1" NegativeROA="0">
        <Vertices>
          <Vertex X="100" Y="200" />
          <Vertex X="300.5" Y="200" />
          <Vertex X="300.5" Y="400.125" />
        </Vertices>
      </Region>
      <Region Id="2" NegativeROA="1">
        <Vertices>
          <Vertex X="150" Y="250" />
          <Vertex X="200" Y="250" />
          <Vertex X="200" Y="300" />
        </Vertices>
      </Region>
    </Regions>
  </Annotation>
  <Annotation Id="2" LineColor="2763301">
    <Regions />
  </Annotation>
</Annotations>
"""


def golden_document() -> AnnotationDocument:
    return AnnotationDocument(
        microns_per_pixel=0.25,
        layers=[
            AnnotationLayer(id=1, name="glom", line_color=(0, 255, 0), regions=[
                Region(id=1, negative=False,
                       vertices=[(100.0, 200.0), (300.5, 200.0), (300.5, 400.125)]),
                Region(id=2, negative=True,
                       vertices=[(150.0, 250.0), (200.0, 250.0), (200.0, 300.0)]),
            ]),
            AnnotationLayer(id=2, name=None, line_color=(37, 42, 42), regions=[]),
        ])


class TestParse:
    def test_minimal_document(self):
        doc = parse_annotations(MINIMAL)
        assert len(doc.layers) == 1
        layer = doc.layers[0]
        assert layer.id == 1
        assert layer.line_color == (0, 255, 0)
        assert len(layer.regions) == 1
        assert layer.regions[0].vertices == [(1.5, 2.0), (10.0, 2.0), (10.0, 12.25)]

    def test_negative_roa_flag(self):
        doc = parse_annotations(MINIMAL.replace('NegativeROA="0"', 'NegativeROA="1"'))
        assert doc.layers[0].regions[0].negative is True

    def test_non_numeric_vertex_names_element(self):
        with pytest.raises(AnnotationParseError) as err:
            parse_annotations(MINIMAL.replace('X="10" Y="2"', 'X="abc" Y="2"'))
        assert "Annotations/Annotation[1]/Regions/Region[1]/Vertices/Vertex[2]" in str(err.value)
        assert "abc" in str(err.value)

    def test_missing_region_id(self):
        with pytest.raises(AnnotationParseError, match="missing required attribute 'Id'"):
            parse_annotations(MINIMAL.replace('Region Id="1"', "Region"))

    def test_malformed_xml(self):
        with pytest.raises(AnnotationParseError, match="malformed XML"):
            parse_annotations("<Annotations><oops>")

    def test_wrong_root(self):
        with pytest.raises(AnnotationParseError, match="expected <Annotations>"):
            parse_annotations("<Nope/>")

    def test_duplicate_layer_ids(self):
        text = ('<Annotations><Annotation Id="1"/><Annotation Id="1"/></Annotations>')
        with pytest.raises(AnnotationParseError, match="duplicate layer Id"):
            parse_annotations(text)


class TestSerialize:
    def test_empty_document(self):
        assert serialize_annotations(AnnotationDocument()) == "<Annotations />\n"

    def test_golden_fixture_bytes(self):
        assert serialize_annotations(golden_document()) == GOLDEN

    def test_golden_fixture_roundtrip(self):
        assert documents_equal(parse_annotations(GOLDEN), golden_document())

    def test_order_preserved(self):
        doc = AnnotationDocument(layers=[
            AnnotationLayer(id=5, name=None, line_color=(1, 2, 3), regions=[
                Region(id=7, negative=False, vertices=[(0.0, 0.0)] * 3),
                Region(id=3, negative=False, vertices=[(1.0, 1.0)] * 3)]),
            AnnotationLayer(id=2, name=None, line_color=(0, 0, 0), regions=[
                Region(id=9, negative=False, vertices=[(2.0, 2.0)] * 3),
                Region(id=1, negative=False, vertices=[(3.0, 3.0)] * 3)]),
        ])
        back = parse_annotations(serialize_annotations(doc))
        assert [l.id for l in back.layers] == [5, 2]
        assert [r.id for r in back.layers[0].regions] == [7, 3]
        assert [r.id for r in back.layers[1].regions] == [9, 1]


def random_document(rng: np.random.Generator) -> AnnotationDocument:
    layers = []
    layer_ids = rng.permutation(50)[: rng.integers(0, 5)] + 1
    for lid in layer_ids:
        regions = []
        region_ids = rng.permutation(50)[: rng.integers(0, 4)] + 1
        for rid in region_ids:
            n = int(rng.integers(3, 9))
            verts = [(float(np.round(rng.uniform(0, 5000), 4)),
                      float(np.round(rng.uniform(0, 5000), 4))) for _ in range(n)]
            regions.append(Region(id=int(rid), negative=bool(rng.random() < 0.3),
                                  vertices=verts))
        name = None if rng.random() < 0.5 else f"layer-{lid}"
        color = tuple(int(v) for v in rng.integers(0, 256, 3))
        layers.append(AnnotationLayer(id=int(lid), name=name, line_color=color,
                                      regions=regions))
    mpp = None if rng.random() < 0.5 else float(np.round(rng.uniform(0.1, 2.0), 6))
    return AnnotationDocument(microns_per_pixel=mpp, layers=layers)


class TestRoundtripProperty:
    def test_fuzzed_documents_roundtrip(self):
        rng = np.random.default_rng(1234)
        for _ in range(200):
            doc = random_document(rng)
            back = parse_annotations(serialize_annotations(doc))
            assert documents_equal(doc, back)

    def test_extreme_coordinates_roundtrip(self):
        doc = AnnotationDocument(layers=[AnnotationLayer(
            id=1, name=None, line_color=(0, 0, 0), regions=[Region(
                id=1, negative=False,
                vertices=[(0.1 + 0.2, 1e-7), (123456.789012345, 3.0),
                          (2.0, 7.25)])])])
        back = parse_annotations(serialize_annotations(doc))
        assert documents_equal(doc, back)


class TestColors:
    def test_line_color_encoding(self):
        assert color_to_int((0, 255, 0)) == 65280  # pure green
        assert color_from_int(65280) == (0, 255, 0)
        for rgb in [(1, 2, 3), (255, 255, 255), (0, 0, 0), (12, 200, 254)]:
            assert color_from_int(color_to_int(rgb)) == rgb


class TestClassMap:
    def test_duplicate_class_rejected(self):
        with pytest.raises(ValueError, match="duplicate class"):
            ClassMap([ClassBinding(1, 1, (0, 0, 0)), ClassBinding(2, 1, (0, 0, 0))])

    def test_class_zero_rejected(self):
        with pytest.raises(ValueError, match="background"):
            ClassMap([ClassBinding(1, 0, (0, 0, 0))])

    def test_json_roundtrip(self, tmp_path, classmap):
        classmap.save(tmp_path / "cm.json")
        back = ClassMap.load(tmp_path / "cm.json")
        assert back.bindings == classmap.bindings
        assert back.n_classes == 3

    def test_lookups(self, classmap):
        assert classmap.class_for_layer(2) == 2
        assert classmap.class_for_layer(9) is None
        assert classmap.binding_for_class(1).layer_id == 1
