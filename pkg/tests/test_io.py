import pytest

from hugat.errors import MissingFile, SchemaViolation
from hugat.io import SCHEMAS, CityTables, load_tables, read_table, table_paths

from conftest import toy_city


def test_round_trip(tmp_path):
    city = toy_city()[0]
    city.tables.write(tmp_path)
    back = load_tables(table_paths(tmp_path))
    for name in SCHEMAS:
        assert getattr(back, name) == getattr(city.tables, name), name


def test_optional_tables_are_skipped(tmp_path):
    t = CityTables(regions=[(0, "a")], pois=[("v", 0, "food")])
    t.write(tmp_path)
    assert not (tmp_path / "crime.csv").exists()
    assert set(table_paths(tmp_path)) == {"regions", "adjacency", "pois", "checkins", "trips",
                                          "landuse"}


@pytest.mark.parametrize("body, line", [
    ("id,name\n0,a\nx,b\n", 3),
    ("id,name\n0,a\n1\n", 3),
    ("id,nom\n0,a\n", 1),
])
def test_schema_violation_reports_line(tmp_path, body, line):
    p = tmp_path / "regions.csv"
    p.write_text(body)
    with pytest.raises(SchemaViolation) as info:
        read_table("regions", p)
    assert info.value.line == line
    assert f"regions.csv:{line}" in str(info.value)


def test_bad_values_and_references(tmp_path):
    p = tmp_path / "trips.csv"
    p.write_text("pickup_ts,dropoff_ts,origin_region,dest_region\n"
                 "2024-01-01T00:00:00,2024-01-01T01:00:00,0,1\n"
                 "2024-01-01T00:00:00,soon,0,1\n")
    with pytest.raises(SchemaViolation) as info:
        read_table("trips", p)
    assert info.value.line == 3
    p.write_text("pickup_ts,dropoff_ts,origin_region,dest_region\n"
                 "2024-01-01T00:00:00,2024-01-01T01:00:00,0,9\n")
    with pytest.raises(SchemaViolation, match="unknown region"):
        read_table("trips", p, region_count=3)
    q = tmp_path / "landuse.csv"
    q.write_text("region_id,landuse_type,area\n0,park,-1\n")
    with pytest.raises(SchemaViolation):
        read_table("landuse", q)


def test_unknown_venue(tmp_path):
    city = toy_city()[0]
    city.tables.checkins.append(("u", "ghost", "2024-01-01T00:00:00"))
    city.tables.write(tmp_path)
    with pytest.raises(SchemaViolation, match="ghost"):
        load_tables(table_paths(tmp_path))


def test_missing_files(tmp_path):
    with pytest.raises(MissingFile):
        read_table("regions", tmp_path / "nope.csv")
    with pytest.raises(MissingFile):
        load_tables({"regions": str(tmp_path / "regions.csv")})
    toy_city()[0].tables.write(tmp_path)
    (tmp_path / "pois.csv").unlink()
    with pytest.raises(MissingFile):
        load_tables(table_paths(tmp_path))
