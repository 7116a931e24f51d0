use std::hint::black_box;

use atr_core::netsim::{run, Scenario, SimOptions};
use atr_core::{hash_id, Mode, NetAddress, NodeId, RoutingTable};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

fn addr(bits: u32) -> NetAddress {
    NetAddress::new(bits, 8).unwrap()
}

/// Hellos from the 15 other holders of a full 4-bit prefix region.
fn neighbour_hellos(mode: Mode) -> Vec<atr_core::HelloPacket> {
    (1..16u32)
        .map(|i| {
            let mut t = RoutingTable::new(addr(i), NodeId(i + 1), mode);
            for j in (0..16u32).filter(|&j| j != i) {
                let h = RoutingTable::new(addr(j), NodeId(j + 1), mode).build_hello();
                t.process_hello(&h, 0);
            }
            t.build_hello()
        })
        .collect()
}

fn process_hellos(c: &mut Criterion) {
    for mode in [Mode::Atr, Mode::Dart] {
        let hellos = neighbour_hellos(mode);
        c.bench_function(&format!("process_hello/{mode}/15 neighbours"), |b| {
            b.iter_batched(
                || RoutingTable::new(addr(0), NodeId(1), mode),
                |mut t| {
                    for h in &hellos {
                        t.process_hello(h, 0);
                    }
                    black_box(t.build_hello())
                },
                BatchSize::SmallInput,
            )
        });
    }
}

fn hashing(c: &mut Criterion) {
    c.bench_function("hash_id/16 bits", |b| {
        b.iter(|| hash_id(black_box(NodeId(0xdead_beef)), 16))
    });
}

fn simulation(c: &mut Criterion) {
    let sc = Scenario::from_toml_str(
        "nodes = 32\nrequire_connected = true\nduration = 60.0\nflow_count = 4\nlookup = \"oracle\"\ntraffic_start = 30.0\n",
    )
    .unwrap();
    let mut group = c.benchmark_group("simulate");
    group.sample_size(10);
    for mode in [Mode::Atr, Mode::Dart] {
        let sc = sc.with_mode(mode);
        group.bench_function(format!("{mode}/32 nodes 60 s"), |b| {
            b.iter(|| run(sc.clone(), SimOptions::default()).unwrap().metrics.delivered)
        });
    }
    group.finish();
}

criterion_group!(benches, process_hellos, hashing, simulation);
criterion_main!(benches);
