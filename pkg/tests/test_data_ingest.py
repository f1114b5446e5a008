import numpy as np
import pytest

from fedseq.data_ingest import (
    CorpusFormatError,
    EmptyCorpusError,
    generate_synthetic,
    leave_one_out_split,
    load_interactions,
    synthetic_cluster_of,
    synthetic_pools,
    write_id_maps,
)


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


class TestLoadInteractions:
    def test_ml1m_format(self, tmp_path):
        lines = []
        # user 7: 3 events with shuffled timestamps; user 9: 3 events
        lines += ["7::101::5::30", "7::102::4::10", "7::103::3::20"]
        lines += ["9::101::5::3", "9::205::2::1", "9::33::1::2"]
        log = load_interactions(_write(tmp_path, "r.dat", "\n".join(lines)), "ml1m")
        assert log.n_users == 2 and log.n_items == 5
        # user 7 densified first (first appearance), events timestamp-sorted
        u7 = log.user_map["7"]
        items_u7 = [i for i, _ in log.events[u7]]
        assert items_u7 == [log.item_map["102"], log.item_map["103"], log.item_map["101"]]

    def test_tsv_and_min_events_filter(self, tmp_path):
        text = "a\t1\t1\na\t2\t2\na\t3\t3\nb\t1\t5\nb\t2\t6\n"
        log = load_interactions(_write(tmp_path, "r.tsv", text), "tsv")
        assert log.n_users == 1  # b has only 2 events
        assert "b" not in log.user_map

    def test_empty_after_filtering(self, tmp_path):
        path = _write(tmp_path, "r.tsv", "b\t1\t5\nb\t2\t6\n")
        with pytest.raises(EmptyCorpusError):
            load_interactions(path, "tsv")

    def test_malformed_line_names_line_number(self, tmp_path):
        path = _write(tmp_path, "r.tsv", "a\t1\t1\na\t2\n")
        with pytest.raises(CorpusFormatError, match="line 2"):
            load_interactions(path, "tsv")

    def test_steam_keeps_play_rows_in_file_order(self, tmp_path):
        rows = [
            "u1,Half-Life,purchase,1.0,0",
            "u1,Half-Life,play,12.1,0",
            "u1,Portal,play,3.0,0",
            "u1,Dota 2,play,100.0,0",
            "u2,Portal,play,1.0,0",
        ]
        log = load_interactions(_write(tmp_path, "s.csv", "\n".join(rows)), "steam")
        assert log.n_users == 1  # u2 filtered (1 play event)
        u1 = log.user_map["u1"]
        assert [i for i, _ in log.events[u1]] == [
            log.item_map["Half-Life"], log.item_map["Portal"], log.item_map["Dota 2"]
        ]

    def test_steam_title_containing_comma(self, tmp_path):
        rows = [
            "u1,Sid Meier's Civilization V, Gods and Kings,play,2.0,0",
            "u1,Portal,play,3.0,0",
            "u1,Dota 2,play,4.0,0",
        ]
        log = load_interactions(_write(tmp_path, "s.csv", "\n".join(rows)), "steam")
        assert "Sid Meier's Civilization V, Gods and Kings" in log.item_map

    def test_densification_on_hand_checked_fixture(self, tmp_path):
        # 3 users x 5 events over item tokens {900, 800, 700, 600}
        lines = []
        for u, items in (("x", [900, 800, 900, 700, 800]),
                         ("y", [700, 700, 600, 900, 800]),
                         ("z", [600, 900, 600, 800, 700])):
            lines += [f"{u}\t{i}\t{t}" for t, i in enumerate(items)]
        log = load_interactions(_write(tmp_path, "r.tsv", "\n".join(lines)), "tsv")
        assert log.n_users == 3
        assert log.n_items == 4  # densified to 1..distinct-count
        assert sorted(log.item_map.values()) == [1, 2, 3, 4]
        # first-appearance order: 900 -> 1, 800 -> 2, 700 -> 3, 600 -> 4
        assert log.item_map == {"900": 1, "800": 2, "700": 3, "600": 4}

    def test_rerun_is_identical(self, tmp_path):
        text = "a\t5\t1\na\t6\t2\na\t7\t3\nc\t5\t9\nc\t9\t8\nc\t6\t7\n"
        path = _write(tmp_path, "r.tsv", text)
        a, b = load_interactions(path, "tsv"), load_interactions(path, "tsv")
        assert a.events == b.events and a.item_map == b.item_map

    def test_id_maps_written(self, tmp_path):
        text = "a\t5\t1\na\t6\t2\na\t7\t3\n"
        log = load_interactions(_write(tmp_path, "r.tsv", text), "tsv")
        upath, ipath = write_id_maps(log, tmp_path / "maps")
        assert upath.read_text() == "a\t1\n"
        assert ipath.read_text() == "5\t1\n6\t2\n7\t3\n"


class TestLeaveOneOut:
    def test_basic_split(self, tmp_path):
        text = "a\t3\t1\na\t7\t2\na\t9\t3\na\t2\t4\n"
        log = load_interactions(_write(tmp_path, "r.tsv", text), "tsv")
        clients = leave_one_out_split(log, 200)
        c = clients[0]
        m = log.item_map
        assert c.train_seq == [m["3"], m["7"], m["9"]]
        assert c.test_item == m["2"]

    def test_truncation_keeps_most_recent(self):
        log = generate_synthetic(10, 10, 250, seed=4)
        clients = leave_one_out_split(log, 200)
        full = [i for i, _ in log.events[1]]
        assert clients[0].train_seq == full[:-1][-200:]
        assert len(clients[0].train_seq) == 200

    def test_three_event_user(self, tmp_path):
        text = "a\t1\t1\na\t2\t2\na\t3\t3\n"
        log = load_interactions(_write(tmp_path, "r.tsv", text), "tsv")
        c = leave_one_out_split(log, 200)[0]
        assert c.train_seq == [1, 2] and c.test_item == 3

    def test_no_padding_and_interaction_budget(self):
        log = generate_synthetic(50, 30, 8, seed=2)
        clients = leave_one_out_split(log, 5)
        assert all(0 not in c.train_seq for c in clients)
        total = sum(len(c.train_seq) + 1 for c in clients)
        assert total <= log.n_interactions


class TestGenerateSynthetic:
    def test_determinism(self):
        a = generate_synthetic(200, 50, 10, seed=1)
        b = generate_synthetic(200, 50, 10, seed=1)
        assert a.events == b.events

    def test_every_user_has_exact_length(self):
        log = generate_synthetic(10, 10, 3, seed=7)
        assert all(len(ev) == 3 for ev in log.events.values())

    def test_cluster_pool_dominance(self):
        log = generate_synthetic(200, 50, 10, seed=1)
        pools = synthetic_pools(50)
        in_pool = total = 0
        for user, evs in log.events.items():
            pool = set(pools[synthetic_cluster_of(user, 50)].tolist())
            in_pool += sum(1 for item, _ in evs if item in pool)
            total += len(evs)
        assert in_pool / total >= 0.8

    def test_cold_tail_untouched(self):
        log = generate_synthetic(200, 50, 10, seed=0)
        seen = {i for evs in log.events.values() for i, _ in evs}
        cold = set(range(46, 51))
        assert not (seen & cold)

    def test_validates_sizes(self):
        with pytest.raises(ValueError):
            generate_synthetic(5, 50, 10, seed=0)
