import io

import pytest
from hypothesis import given, settings, strategies as hst

from lesionfair.cohort import (
    ARCHIVE_SNAPSHOT,
    CELLS,
    AgeBand,
    Cohort,
    ColumnMap,
    CohortTable,
    Label,
    LesionRecord,
    Sex,
    cell_key,
    dedup,
    drop_unknown_sex,
    filter_defined_age,
    one_per_patient,
    parse_cell_key,
    parse_metadata,
    prepare,
    synthesize_cohort,
    tabulate,
    write_cohort,
)
from lesionfair.errors import CapacityError, DataError, FormatError, PreconditionError

SMALL = (
    "image_id,patient_id,age,sex,label\n"
    "a,p1,45,female,malignant\n"
    "b,p2,,male,benign\n"
    "c,p3,60,M,benign\n"
)


def rec(i, pid=None, age=40, sex=Sex.FEMALE, label=Label.BENIGN):
    return LesionRecord(f"I{i}", pid or f"P{i}", age, sex, label)


def test_parse_small_file():
    c = parse_metadata(SMALL)
    assert len(c) == 3
    assert c.records[1].age is None
    assert c.records[2].sex is Sex.MALE
    assert len(filter_defined_age(c)) == 2


def test_parse_tsv_and_isic_columns():
    text = "isic_id\tpatient_id\tage_approx\tsex\tbenign_malignant\nx\tp\t70\tfemale\tbenign\n"
    c = parse_metadata(text, ColumnMap.isic())
    assert c.records[0].age == 70 and c.records[0].age_band() is AgeBand.AT_LEAST


def test_parse_skips_unusable_label():
    c = parse_metadata(SMALL + "d,p4,50,female,indeterminate\n")
    assert len(c) == 3
    assert c.report()["skip_counts"] == {"parse:label 'indeterminate'": 1}
    assert c.skipped[0].ref == "d"


def test_parse_errors():
    with pytest.raises(FormatError, match="label"):
        parse_metadata("image_id,patient_id,age,sex\na,p,1,f\n")
    with pytest.raises(DataError, match="duplicate"):
        parse_metadata(SMALL + "a,p9,45,female,benign\n")


def test_write_parse_roundtrip(metadata_text):
    c = parse_metadata(metadata_text)
    buf = io.StringIO()
    write_cohort(c, buf)
    assert parse_metadata(buf.getvalue()).records == c.records


def test_dedup_pairs_and_unknown_reference():
    c = Cohort(tuple(rec(i) for i in range(4)))
    out = dedup(c, [("I0", "I2")])
    assert out.image_ids == ("I0", "I1", "I3")
    assert out.skipped[-1].ref == "I2"
    with pytest.raises(DataError, match="nope"):
        dedup(c, [("I0", "nope")])
    assert dedup(c, detector=lambda _: [("I1", "I3")]).image_ids == ("I0", "I1", "I2")


def test_one_per_patient():
    records = [rec(i, pid=f"P{i % 3}") for i in range(9)] + [rec(99, pid="")]
    c = Cohort(tuple(records))
    out = one_per_patient(c, seed=4)
    assert len(out) == 4
    assert out == one_per_patient(c, seed=4)
    assert len({r.patient_id for r in out.records}) == 4


def test_tabulate_age_boundary_and_snapshot():
    c = Cohort((rec(0, age=59), rec(1, age=60), rec(2, age=60, sex=Sex.MALE, label=Label.MALIGNANT)))
    t = tabulate(c)
    assert t[(Label.BENIGN, Sex.FEMALE, AgeBand.UNDER)] == 1
    assert t[(Label.BENIGN, Sex.FEMALE, AgeBand.AT_LEAST)] == 1
    assert t[(Label.MALIGNANT, Sex.MALE, AgeBand.AT_LEAST)] == 1
    assert tabulate(Cohort(())).total == 0
    with pytest.raises(PreconditionError):
        tabulate(Cohort((rec(0, sex=Sex.UNKNOWN),)))
    assert tabulate(synthesize_cohort(ARCHIVE_SNAPSHOT)) == ARCHIVE_SNAPSHOT
    assert ARCHIVE_SNAPSHOT[(Label.MALIGNANT, Sex.FEMALE, AgeBand.UNDER)] == 1371
    assert ARCHIVE_SNAPSHOT[(Label.BENIGN, Sex.MALE, AgeBand.UNDER)] == 12239


def test_table_helpers():
    assert all(parse_cell_key(cell_key(c)) == c for c in CELLS)
    assert CohortTable.from_dict(ARCHIVE_SNAPSHOT.to_dict()) == ARCHIVE_SNAPSHOT
    assert ARCHIVE_SNAPSHOT.minus(158).total == ARCHIVE_SNAPSHOT.total - 8 * 158
    with pytest.raises(CapacityError):
        ARCHIVE_SNAPSHOT.minus(1262)


def test_prepare_pipeline(metadata_text):
    c = prepare(parse_metadata(metadata_text), seed=0)
    assert all(r.age is not None and r.sex is not Sex.UNKNOWN for r in c.records)
    assert len({r.patient_id for r in c.records}) == len(c)
    assert tabulate(c).total == len(c)
    report = c.report()
    assert report["provenance"][0] == "parse_metadata"
    steps = {key.split(":")[0] for key in report["skip_counts"]}
    assert steps <= {"parse", "filter_defined_age", "dedup", "one_per_patient", "drop_unknown_sex"}


records_st = hst.lists(
    hst.builds(
        LesionRecord,
        image_id=hst.sampled_from([f"I{i}" for i in range(30)]),
        patient_id=hst.sampled_from(["", "P1", "P2", "P3", "P4"]),
        age=hst.one_of(hst.none(), hst.integers(0, 100)),
        sex=hst.sampled_from(list(Sex)),
        label=hst.sampled_from(list(Label)),
    ),
    max_size=40,
)


@settings(max_examples=100, deadline=None)
@given(records=records_st, seed=hst.integers(0, 50))
def test_filters_idempotent_and_counts_add_up(records, seed):
    c = Cohort(tuple(records))
    for step in (filter_defined_age, dedup, drop_unknown_sex, lambda x: one_per_patient(x, seed)):
        once = step(c)
        assert step(once).records == once.records
        assert set(once.image_ids) <= set(c.image_ids)
    clean = drop_unknown_sex(filter_defined_age(c))
    assert tabulate(clean).total == len(clean)
