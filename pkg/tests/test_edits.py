import json

import pytest

from osmforge.edits import AddFeature, ChangeTags, EditScript, RemoveFeature, apply_edit, diff_documents
from osmforge.errors import EditError, ParseError, SchemaError
from osmforge.osm import Node, OsmDocument, TagMap, Way


def _base():
    return OsmDocument.from_elements([Node(1, 0, 0), Node(2, 0.001, 0),
                                      Way(10, (1, 2), TagMap({"highway": "path"}))])


def _script(data_dir, name):
    return EditScript.loads((data_dir / "edits" / f"{name}.json").read_text())


def test_add_appends_new_elements(main_doc, data_dir):
    after = apply_edit(main_doc, _script(data_dir, "add_stadium"))
    cs = diff_documents(main_doc, after)
    assert len(cs.added) == 9 and not cs.removed and not cs.retagged
    assert any(el.tags.get("leisure") == "stadium" for el in cs.added)
    assert len(main_doc) + 9 == len(after)


def test_remove(main_doc, data_dir, fixture_ids):
    after = apply_edit(main_doc, _script(data_dir, "remove_storage_tanks"))
    assert {("way", fixture_ids["tank_a"]), ("way", fixture_ids["tank_b"])} == set(
        diff_documents(main_doc, after).removed_ids)


def test_change_tags(main_doc, data_dir, fixture_ids):
    after = apply_edit(main_doc, _script(data_dir, "lake_to_grass"))
    lake = after.get("way", fixture_ids["lake"])
    assert dict(lake.tags) == {"landuse": "grass"}
    cs = diff_documents(main_doc, after)
    assert cs.retagged_ids == [("way", fixture_ids["lake"])] and not cs.modified


def test_input_is_untouched(main_doc, data_dir):
    before = main_doc.to_json()
    apply_edit(main_doc, _script(data_dir, "remove_buildings"))
    assert main_doc.to_json() == before


def test_empty_script_is_identity(main_doc):
    assert apply_edit(main_doc, EditScript()) == main_doc


@pytest.mark.parametrize("ops,index", [
    ([RemoveFeature("way", 1)], 0),
    ([ChangeTags("way", 10, {"highway": None}), ChangeTags("node", 77, {"a": "b"})], 1),
    ([RemoveFeature("way", 10), RemoveFeature("way", 10)], 1),
    ([AddFeature((Node(2, 0, 0),))], 0),
    ([AddFeature((Node(5, 0, 0), Node(5, 0, 0)))], 0),
])
def test_edit_errors_name_the_op(ops, index):
    with pytest.raises(EditError) as exc:
        apply_edit(_base(), EditScript(ops))
    assert exc.value.op_index == index


def test_change_to_empty_value_is_edit_error():
    with pytest.raises(EditError):
        apply_edit(_base(), EditScript([ChangeTags("way", 10, {"highway": ""})]))


@pytest.mark.parametrize("name", ["add_stadium", "add_building", "remove_buildings",
                                  "remove_storage_tanks", "lake_to_grass", "crop_to_solar"])
def test_diff_script_round_trip(main_doc, data_dir, name):
    after = apply_edit(main_doc, _script(data_dir, name))
    script = diff_documents(main_doc, after).to_script()
    assert apply_edit(main_doc, EditScript.loads(script.dumps())) == after


def test_geometry_change_is_modified():
    base = _base()
    moved = apply_edit(base, EditScript([RemoveFeature("node", 2), AddFeature((Node(2, 0.002, 0),))]))
    cs = diff_documents(base, moved)
    assert cs.modified_ids == [("node", 2)] and cs.touched() == {("node", 2)}
    assert apply_edit(base, cs.to_script()) == moved


def test_parse_errors():
    with pytest.raises(ParseError):
        EditScript.loads("[{")
    for raw in ({}, [1], [{"op": "move"}], [{"op": "remove", "type": "way"}],
                [{"op": "change", "type": "way", "id": 1}], [{"op": "add", "elements": []}]):
        with pytest.raises(SchemaError):
            EditScript.from_json(raw)


def test_json_shape(data_dir):
    raw = json.loads((data_dir / "edits" / "lake_to_grass.json").read_text())
    assert EditScript.from_json(raw).to_json() == raw
