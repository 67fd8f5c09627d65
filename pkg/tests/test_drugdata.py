from __future__ import annotations

import json

import pytest

from malade.drugdata import (
    DatasetMissing,
    LabelClient,
    NdcDirectory,
    NotFound,
    PrescriptionRates,
    UpstreamError,
    best_label,
    cache_key,
    truncate_extract,
)


def test_ndc_search_by_class_merges_case_variants(fixtures):
    found = NdcDirectory(fixtures / "ndc.json").find_category_drugs(["Angiotensin Converting Enzyme Inhibitor"])
    names = [r.name for r in found]
    assert names == [
        "BENAZEPRIL HYDROCHLORIDE",
        "CAPTOPRIL",
        "ENALAPRIL MALEATE",
        "LISINOPRIL",
        "LISINOPRIL AND HYDROCHLOROTHIAZIDE",
    ]
    lis = found[3]
    assert lis.product_ids == ("0001-0001", "0001-0006")


def test_ndc_search_by_name_and_multiple_terms(fixtures):
    ndc = NdcDirectory(fixtures / "ndc.json")
    assert [r.name for r in ndc.find_category_drugs(["alendronate"])] == ["ALENDRONATE SODIUM"]
    both = ndc.find_category_drugs(["alendronate", "risedronate", "ALENDRONATE"])
    assert [r.name for r in both] == ["ALENDRONATE SODIUM", "RISEDRONATE SODIUM"]
    assert ndc.find_category_drugs(["nothing-like-this"]) == []
    with pytest.raises(ValueError):
        ndc.find_category_drugs([" "])


def test_ndc_missing_fixture(tmp_path):
    with pytest.raises(DatasetMissing):
        NdcDirectory(tmp_path / "none.json").find_category_drugs(["x"])


def test_prescription_rates_count_rows(fixtures):
    rates = PrescriptionRates(fixtures / "prescriptions.csv").rates(["Lisinopril", "CAPTOPRIL", "unknown"])
    assert [(r.count, r.rate) for r in rates] == [(40, 40 / 193), (6, 6 / 193), (0, 0.0)]
    assert rates[0].name == "Lisinopril"


def test_prescriptions_missing_file_or_column(tmp_path):
    with pytest.raises(DatasetMissing):
        PrescriptionRates(tmp_path / "none.csv").rates(["a"])
    bad = tmp_path / "bad.csv"
    bad.write_text("patient,medication\np1,a\n")
    with pytest.raises(DatasetMissing):
        PrescriptionRates(bad).rates(["a"])


def test_fixture_label_prefers_newest_document(fixtures):
    label = LabelClient(fixtures / "labels").fetch_label("lisinopril")
    assert label.source_id == "label-001" and label.effective_time == "20230101"
    assert label.candidates == 2
    assert "angioedema" in " ".join(label.sections.values()).lower()


def test_best_label_ranking():
    def doc(i, generic=(), brand=(), t="2020"):
        return {"id": i, "effective_time": t, "warnings": "w", "openfda": {"generic_name": list(generic), "brand_name": list(brand)}}

    docs = [doc("brand", brand=["ZESTRIL"], t="2024"), doc("gen", generic=["ZESTRIL"], t="2010"), doc("other", t="2030")]
    assert best_label("zestril", docs)["id"] == "gen"
    assert best_label("zestril", docs[::2])["id"] == "brand"
    with pytest.raises(NotFound):
        best_label("x", [{"id": "empty", "openfda": {}}])


def test_fixture_label_not_found(fixtures):
    with pytest.raises(NotFound):
        LabelClient(fixtures / "labels").fetch_label("metformin hydrochloride")


def label_doc(name="LISINOPRIL", text="angioedema may occur."):
    return {"results": [{"id": "L1", "effective_time": "20200101", "warnings": [text], "openfda": {"generic_name": [name]}}]}


def test_live_cache_hit_makes_no_request(stub_server, tmp_path):
    srv = stub_server([(200, {}, label_doc())])
    cache = tmp_path / "cache"
    first = LabelClient(url=srv.url, cache_dir=cache, clock=lambda: 1.0).fetch_label("Lisinopril")
    again = LabelClient(url=srv.url, cache_dir=cache, clock=lambda: 2.0).fetch_label("lisinopril")
    assert len(srv.hits) == 1
    assert again == first
    stored = json.loads((cache / f"{cache_key('lisinopril')}.json").read_text())
    assert stored["sections"] == {"warnings": "angioedema may occur."}


def test_refresh_refetches_once_per_client(stub_server, tmp_path):
    srv = stub_server([(200, {}, label_doc(text="old")), (200, {}, label_doc(text="new"))])
    cache = tmp_path / "cache"
    LabelClient(url=srv.url, cache_dir=cache).fetch_label("lisinopril")
    client = LabelClient(url=srv.url, cache_dir=cache, refresh=True)
    assert client.fetch_label("lisinopril").sections["warnings"] == "new"
    client.fetch_label("lisinopril")
    assert len(srv.hits) == 2


def test_live_404_is_not_found_and_500_is_upstream(stub_server):
    srv = stub_server([(404, {}, {"error": {"code": "NOT_FOUND"}})])
    with pytest.raises(NotFound):
        LabelClient(url=srv.url).fetch_label("nothing")
    srv = stub_server([(500, {}, {})])
    with pytest.raises(UpstreamError) as ei:
        LabelClient(url=srv.url).fetch_label("lisinopril")
    assert ei.value.status == 500


def test_api_key_sent_when_configured(stub_server, monkeypatch):
    monkeypatch.setenv("OPENFDA_API_KEY", "k123")
    srv = stub_server([(200, {}, label_doc())])
    LabelClient(url=srv.url).fetch_label("lisinopril")
    assert "api_key=k123" in srv.hits[0][1]


def test_empty_drug_name_rejected(fixtures):
    with pytest.raises(ValueError):
        LabelClient(fixtures / "labels").fetch_label("  ")


@pytest.mark.parametrize(
    "text, expected",
    [
        ("one two three", "one two three"),
        ("a b c d e f", "a b c d e f"),
        ("a b c d e f g", "a b c ... e f g"),
        ("  spaced   out  ", "spaced out"),
    ],
)
def test_truncate_extract(text, expected):
    assert truncate_extract(text) == expected


def test_cache_key_is_filesystem_safe():
    assert cache_key("Enalapril  Maleate/10mg") == "enalapril_maleate_10mg"
    assert cache_key("!!!") == "_"
