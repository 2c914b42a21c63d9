import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from lagsim.core import (
    ConversationId,
    Frame,
    FrameKind,
    LagKey,
    MacAddress,
    MacParseError,
    PortIdentity,
    SequenceAllocator,
    SystemId,
    aggregation_port,
    compare_system,
    format_seconds,
    mac_from_int,
    parse_mac,
    to_micros,
)

macs = st.tuples(*[st.integers(0, 255)] * 6).map(MacAddress)


class TestParseMac:
    def test_reads_hex_pairs(self):
        assert parse_mac("00:00:00:00:00:22").octets == (0, 0, 0, 0, 0, 0x22)

    def test_all_ones(self):
        assert parse_mac("ff:ff:ff:ff:ff:ff").octets == (255,) * 6

    def test_bad_digit_names_pair(self):
        with pytest.raises(MacParseError) as err:
            parse_mac("00:00:00:00:00:2g")
        assert err.value.position == 6

    @pytest.mark.parametrize("text", ["", "00:00:00:00:00", "00:00:00:00:00:00:00", "0:00:00:00:00:00"])
    def test_rejects_wrong_shape(self, text):
        with pytest.raises(MacParseError):
            parse_mac(text)

    def test_uppercase_is_accepted_and_normalised(self):
        assert str(parse_mac("AA:BB:CC:DD:EE:FF")) == "aa:bb:cc:dd:ee:ff"

    @given(macs)
    def test_roundtrip(self, mac):
        assert parse_mac(str(mac)) == mac

    @given(macs)
    def test_text_is_canonical(self, mac):
        text = str(mac)
        assert str(parse_mac(text)) == text
        assert text == text.lower() and len(text) == 17


class TestCompareSystem:
    a1 = SystemId(100, parse_mac("00:00:00:00:00:01"))

    def test_priority_dominates(self):
        assert compare_system(self.a1, SystemId(200, parse_mac("00:00:00:00:00:01"))) < 0

    def test_address_breaks_ties(self):
        assert compare_system(self.a1, SystemId(100, parse_mac("00:00:00:00:00:02"))) < 0

    def test_reflexive(self):
        assert compare_system(self.a1, self.a1) == 0

    def test_total_order_on_small_domain(self):
        domain = [SystemId(p, mac_from_int(m)) for p in (0, 1, 2) for m in (0, 1, 0x100, 0x10000000000)]
        for a, b in itertools.product(domain, repeat=2):
            ab, ba = compare_system(a, b), compare_system(b, a)
            assert ab == -ba
            assert (ab == 0) == (a == b)
        for a, b, c in itertools.product(domain, repeat=3):
            if compare_system(a, b) <= 0 and compare_system(b, c) <= 0:
                assert compare_system(a, c) <= 0


class TestValueTypes:
    def test_port_zero_rejected_for_aggregation(self):
        with pytest.raises(ValueError):
            aggregation_port(0)

    def test_key_is_16_bit(self):
        with pytest.raises(ValueError):
            LagKey(0x10000)

    def test_conversation_is_directional(self):
        a, b = mac_from_int(1), mac_from_int(2)
        assert ConversationId(a, b) != ConversationId(b, a)

    def test_frame_rejects_negative_payload(self):
        with pytest.raises(ValueError):
            Frame(mac_from_int(1), mac_from_int(2), 1, -1, 0, FrameKind.BULK)

    def test_wire_bits_include_overhead(self):
        assert Frame(mac_from_int(1), mac_from_int(2), 1, 1500, 0, FrameKind.BULK).bits == 1518 * 8

    @given(st.lists(st.sampled_from([0, 1, 2]), max_size=50))
    def test_sequence_strictly_increasing_per_conversation(self, picks):
        convs = [ConversationId(mac_from_int(i), mac_from_int(9)) for i in range(3)]
        alloc = SequenceAllocator()
        last = {}
        for i in picks:
            seq = alloc.next(convs[i])
            assert seq > last.get(i, 0)
            last[i] = seq

    def test_time_formatting_is_exact(self):
        assert format_seconds(to_micros(30.1)) == "30.100000"
        assert format_seconds(1) == "0.000001"
        assert PortIdentity(0, 0).is_null
