import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from galasim import fabric
from galasim.fabric import (ConfigError, Flit, GalapagosHeader, GalapagosPacket,
                            KernelAddress, NetworkConfig, RoutingFault,
                            RoutingTables, attach_gmi_header, decode_header,
                            encode_header, flit_count, route, strip_gmi_header,
                            to_flits)


def make_packet(receiver, inter_cluster=False, size=768, gmi=None):
    hdr = GalapagosHeader(sender=KernelAddress(0, 1), receiver=receiver,
                          message_size=size, inter_cluster=inter_cluster,
                          gmi_byte=gmi)
    return GalapagosPacket(hdr, bytes(size))


class TestAddressing:
    def test_fields_fit_eight_bits(self):
        KernelAddress(255, 255)
        with pytest.raises(Exception):
            KernelAddress(256, 0)
        with pytest.raises(Exception):
            KernelAddress(0, -1)

    def test_total_addressable(self):
        assert 256 * 256 == 65536


class TestFlits:
    def test_row_of_768_bytes_is_12_flits(self):
        assert flit_count(768) == 12
        flits = to_flits(bytes(768))
        assert len(flits) == 12
        assert all(not f.last for f in flits[:-1]) and flits[-1].last

    def test_empty_payload_still_one_beat(self):
        assert flit_count(0) == 1

    def test_oversized_flit_rejected(self):
        with pytest.raises(Exception):
            Flit(bytes(65))


class TestHeaderCodec:
    @settings(max_examples=300, deadline=None)
    @given(sc=st.integers(0, 255), sk=st.integers(0, 255),
           rc=st.integers(0, 255), rk=st.integers(0, 255),
           size=st.integers(0, 2**32 - 1), inter=st.booleans(),
           gmi=st.one_of(st.none(), st.integers(0, 255)))
    def test_round_trip(self, sc, sk, rc, rk, size, inter, gmi):
        h = GalapagosHeader(KernelAddress(sc, sk), KernelAddress(rc, rk),
                            size, inter, gmi)
        assert decode_header(encode_header(h)) == h

    def test_wire_size_is_16_bytes(self):
        h = GalapagosHeader(KernelAddress(0, 0), KernelAddress(0, 0), 0)
        assert len(encode_header(h)) == 16


class TestRoute:
    def test_local_lookup(self):
        tables = RoutingTables(cluster_id=0, local_table={5: "nodeB"})
        pkt = make_packet(KernelAddress(0, 5))
        assert route(pkt, tables) == "nodeB"

    def test_inter_cluster_goes_to_gateway(self):
        tables = RoutingTables(cluster_id=0, gateway_table={3: "gw3"})
        pkt = make_packet(KernelAddress(3, 7), inter_cluster=True)
        assert route(pkt, tables) == "gw3"

    def test_missing_entry_is_routing_fault(self):
        tables = RoutingTables(cluster_id=0)
        with pytest.raises(RoutingFault) as err:
            route(make_packet(KernelAddress(0, 9)), tables)
        assert err.value.unresolved == KernelAddress(0, 9)
        with pytest.raises(RoutingFault) as err:
            route(make_packet(KernelAddress(2, 0), inter_cluster=True), tables)
        assert err.value.unresolved == 2

    def test_square_table_bound(self):
        # 4 clusters x 4 kernels: own 4 + 3 foreign gateways = 7 < 16 full mesh
        tables = RoutingTables(
            cluster_id=0,
            local_table={k: f"n{k}" for k in range(4)},
            gateway_table={c: f"gw{c}" for c in range(1, 4)})
        assert tables.stored_addresses() == 7 <= 2 * 4 - 1
        assert tables.stored_addresses() < 4 * 4


class TestGmiHeaderBytes:
    def test_prepends_destination_byte(self):
        out = attach_gmi_header(bytes(768), 17)
        assert len(out) == 769 and out[0] == 0x11

    def test_gateway_destination_zero(self):
        assert attach_gmi_header(b"xy", 0)[0] == 0x00

    def test_round_trip(self):
        dest, payload = strip_gmi_header(attach_gmi_header(b"payload", 17))
        assert (dest, payload) == (17, b"payload")

    def test_out_of_range_rejected(self):
        with pytest.raises(Exception):
            attach_gmi_header(b"", 256)


class TestTransit:
    def topo(self):
        return NetworkConfig(
            topology=[("a", "sw0"), ("b", "sw0"), ("c", "sw1")],
            switch_links=[("sw0", "sw1")],
            link_bytes_per_cycle=math.inf)

    def test_same_switch_single_hop(self):
        cfg = self.topo()
        # 1.1 us at 200 MHz = 220 cycles
        assert cfg.transit_cycles(768, "a", "b") == 220

    def test_two_switches_in_series(self):
        cfg = self.topo()
        assert cfg.transit_cycles(768, "a", "c") == 2 * 220

    def test_serialization_at_finite_bandwidth(self):
        cfg = NetworkConfig(topology=[("a", "s"), ("b", "s")],
                            switch_latency_s=0.0)
        assert cfg.transit_cycles(768, "a", "b") == 12

    def test_unattached_node_is_config_error(self):
        cfg = self.topo()
        with pytest.raises(ConfigError):
            cfg.transit_cycles(1, "a", "zz")

    def test_loss_probability_validated(self):
        with pytest.raises(ConfigError):
            NetworkConfig(loss_probability=1.5)
