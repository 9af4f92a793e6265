//! Router behaviour of freshly initialized generators.

use moegan_core::data::SyntheticSpec;
use moegan_core::evaluation::{route_viz, sample_latents};
use moegan_core::generator::Generator;
use moegan_core::nn::ParamStore;
use moegan_core::Config;

fn generator(seed: u64) -> Generator {
    let mut cfg = Config::tiny();
    cfg.model.resolutions = vec![4, 8];
    cfg.model.channels = vec![8, 8];
    cfg.model.disc_channels = vec![8, 8];
    cfg.model.experts = 4;
    let mut store = ParamStore::new(seed);
    Generator::new(&mut store, &cfg.model, 2).unwrap()
}

fn captions(n: usize) -> Vec<String> {
    let spec = SyntheticSpec::two_by_two(0);
    (0..n)
        .map(|i| {
            format!(
                "a {} {} on a {} background",
                spec.colors[i % 2],
                spec.shapes[(i / 2) % 2],
                spec.backgrounds[0]
            )
        })
        .collect()
}

#[test]
fn every_expert_receives_points_at_the_finer_stage() {
    let caps = captions(32);
    for seed in 0..20 {
        let g = generator(seed);
        let z = sample_latents(seed, 32, g.config().z_dim).unwrap();
        let out = g.synthesize(&z, &caps).unwrap();
        let layer = out.routing.iter().find(|l| l.resolution == 8).expect("8x8 layer");
        let fractions = layer.decision.stats().unwrap().fractions;
        assert!(fractions.iter().all(|&f| f > 0.0), "seed {seed}: {fractions:?}");
    }
}

#[test]
fn each_point_is_evaluated_by_exactly_one_expert() {
    let g = generator(3);
    g.reset_expert_counters();
    let out = g.synthesize(&sample_latents(1, 5, g.config().z_dim).unwrap(), &captions(5)).unwrap();
    let evaluations = g.expert_point_evaluations();
    for (layer, counts) in out.routing.iter().zip(&evaluations) {
        let points = layer.batch * layer.resolution * layer.resolution;
        assert_eq!(counts.iter().sum::<usize>(), points, "{}x{}", layer.resolution, layer.resolution);
    }
}

#[test]
fn routing_maps_follow_the_batch_routing() {
    let g = generator(5);
    let prompt = "a red square on a black background";
    let viz = route_viz(&g, prompt, 9).unwrap();
    let out = g
        .synthesize(&sample_latents(9, 1, g.config().z_dim).unwrap(), &[prompt.to_string()])
        .unwrap();
    assert_eq!(viz.layers.len(), out.routing.len());
    for ((res, map), layer) in viz.layers.iter().zip(&out.routing) {
        assert_eq!(*res, layer.resolution);
        assert_eq!(map.flatten(), layer.decision.indices);
    }
    let text = viz.utilization_text();
    assert_eq!(text.lines().count(), 2);
    assert!(text.starts_with("4x4: "));
}
