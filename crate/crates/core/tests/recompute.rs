use memsched::recompute::{self, PlanKind, Strategy};
use memsched::{fixtures, parse_network, CostConfig, Model};

fn alexnet() -> Model {
    let mut cost = CostConfig::default().with_batch(200);
    cost.input_on_device = false;
    Model::build(&fixtures::alexnet(), &cost).unwrap()
}

#[test]
fn alexnet_segments() {
    let m = alexnet();
    let covered: usize = m.segments.iter().map(|s| s.len()).sum();
    assert_eq!(m.segments.len(), 7);
    // Every layer that is not DATA, a checkpoint or the terminal layer.
    assert_eq!(covered, 24 - 1 - m.recompute_cps.len() - 1);
    for seg in &m.segments {
        assert!(m.recompute_cps.contains(&seg.anchor));
    }
}

#[test]
fn plan_extras_order_and_peaks() {
    let m = alexnet();
    let speed = recompute::plan(&m, PlanKind::SpeedCentric, true);
    let memory = recompute::plan(&m, PlanKind::MemoryCentric, true);
    let cost = recompute::plan(&m, PlanKind::CostAware, true);
    assert_eq!((speed.extra, memory.extra, cost.extra), (14, 23, 17));
    assert_eq!(speed.segment_extra.iter().sum::<usize>(), speed.extra);
    assert!(speed.peak_bytes >= cost.peak_bytes);
    assert_eq!(cost.peak_bytes, memory.peak_bytes);
    assert_eq!(cost.peak_bytes, m.l_peak().0);
    assert!(speed.choices.iter().all(|&c| c == Strategy::Speed));
    assert!(memory.choices.iter().all(|&c| c == Strategy::Memory));
}

#[test]
fn single_layer_segment_replays_once() {
    let net = parse_network(
        "layer data DATA c=2 h=4 w=4\n\
         layer conv1 CONV out=2 k=3 s=1 p=1\n\
         layer act1 ACT\n\
         layer conv2 CONV out=2 k=3 s=1 p=1\n\
         layer soft SOFTMAX\n\
         edge data conv1\nedge conv1 act1\nedge act1 conv2\nedge conv2 soft\n",
    )
    .unwrap();
    let m = Model::build(&net, &CostConfig::default().with_batch(1)).unwrap();
    assert_eq!(m.segments.len(), 1);
    for kind in [PlanKind::SpeedCentric, PlanKind::MemoryCentric, PlanKind::CostAware] {
        assert_eq!(recompute::plan(&m, kind, true).extra, 1, "{kind}");
    }
}

#[test]
fn plan_csv_lists_each_segment() {
    let m = alexnet();
    let p = recompute::plan(&m, PlanKind::CostAware, true);
    let csv = recompute::dump_plan_csv(&m, &p);
    assert_eq!(csv.lines().count(), 1 + m.segments.len());
    assert!(csv.lines().skip(1).all(|l| l.contains(",speed,") || l.contains(",memory,")));
}
