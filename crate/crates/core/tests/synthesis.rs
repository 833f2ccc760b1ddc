mod support;

use motionrag_core::contrastive::{embed, Side};
use motionrag_core::kinematics::{forward_kinematics, Frame};
use motionrag_core::metrics::{frame_steps, seam_stats};
use motionrag_core::synthesis::{
    generate, generate_into, node_embeddings, select_next, GenerationSink, SegmentBinding, Strategy,
    SynthesisConfig,
};
use motionrag_core::{Error, Result};

/// Index of the highest score, first index on ties.
fn argmax(scores: impl Iterator<Item = (usize, f64)>) -> usize {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (i, s) in scores {
        if s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

#[test]
fn greedy_walk_replays_as_argmax() {
    let fx = support::fixture();
    let node_emb = node_embeddings(&fx.graph, &fx.model).unwrap();
    let music_emb = embed(&fx.model, &fx.music.view(), Side::Music).unwrap();
    let trace = generate(&fx.graph, &fx.music.view(), &fx.model, 2000, &SynthesisConfig::default()).unwrap();
    let segs = music_emb.nrows();
    let score = |n: usize, seg: usize| node_emb.row(n).dot(&music_emb.row(seg % segs));
    assert_eq!(trace.nodes[0], argmax((0..fx.graph.len()).map(|n| (n, score(n, 0)))));
    for (i, w) in trace.nodes.windows(2).enumerate() {
        let want = argmax(fx.graph.successors(w[0]).iter().map(|&n| (n, score(n, i + 1))));
        assert_eq!(w[1], want, "step {}", i + 1);
        let seg = music_emb.row((i + 1) % segs).to_vec();
        assert_eq!(select_next(&fx.graph, w[0], &seg, &fx.model).unwrap(), want);
    }
}

#[test]
fn walks_follow_edges_and_hit_the_length() {
    let fx = support::fixture();
    let strategies = [Strategy::Greedy, Strategy::Beam { width: 4 }];
    let bindings = [SegmentBinding::PerNode, SegmentBinding::ByTime];
    for len in [2, 59, 60, 61, 500, 3001] {
        for strategy in strategies {
            for binding in bindings {
                let cfg = SynthesisConfig {
                    strategy,
                    binding,
                    ..SynthesisConfig::default()
                };
                let t = generate(&fx.graph, &fx.music.view(), &fx.model, len, &cfg).unwrap();
                assert_eq!(t.motion.frames(), len);
                assert!(t.nodes.windows(2).all(|w| fx.graph.has_edge(w[0], w[1])));
                assert_eq!(t.transitions.len(), t.nodes.len() - 1);
            }
        }
    }
}

#[test]
fn beam_of_width_one_is_greedy() {
    let fx = support::fixture();
    let greedy = generate(&fx.graph, &fx.music.view(), &fx.model, 1500, &SynthesisConfig::default()).unwrap();
    let cfg = SynthesisConfig {
        strategy: Strategy::Beam { width: 1 },
        ..SynthesisConfig::default()
    };
    let beam = generate(&fx.graph, &fx.music.view(), &fx.model, 1500, &cfg).unwrap();
    assert_eq!(greedy.nodes, beam.nodes);
}

#[derive(Default)]
struct Frames(Vec<Frame>, usize);

impl GenerationSink for Frames {
    fn frame(&mut self, frame: &Frame) -> Result<()> {
        self.0.push(frame.clone());
        Ok(())
    }

    fn node(&mut self, _node: usize) -> Result<()> {
        self.1 += 1;
        Ok(())
    }
}

#[test]
fn streaming_matches_in_memory() {
    let fx = support::fixture();
    let cfg = SynthesisConfig::default();
    let t = generate(&fx.graph, &fx.music.view(), &fx.model, 777, &cfg).unwrap();
    let mut sink = Frames::default();
    generate_into(&fx.graph, &fx.music.view(), &fx.model, 777, &cfg, &mut sink).unwrap();
    assert_eq!(sink.0.len(), 777);
    assert_eq!(sink.1, t.nodes.len());
    for (f, frame) in sink.0.iter().enumerate() {
        assert_eq!(*frame, t.motion.frame(f));
    }
    let mut one = Frames::default();
    generate_into(&fx.graph, &fx.music.view(), &fx.model, 1, &cfg, &mut one).unwrap();
    assert_eq!(one.0.len(), 1);
}

#[test]
fn invalid_requests_are_rejected() {
    let fx = support::fixture();
    let cfg = SynthesisConfig::default();
    assert!(matches!(generate(&fx.graph, &fx.music.view(), &fx.model, 0, &cfg), Err(Error::Config(_))));
    let long_blend = SynthesisConfig {
        blend_frames: 31,
        ..cfg
    };
    assert!(generate(&fx.graph, &fx.music.view(), &fx.model, 100, &long_blend).is_err());
    let raw = motionrag_core::graph::build_graph_from_corpus(&fx.corpus, &Default::default()).unwrap();
    assert!(matches!(generate(&raw, &fx.music.view(), &fx.model, 100, &cfg), Err(Error::Invariant(_))));
}

#[test]
fn blending_halves_seam_residuals() {
    let fx = support::fixture();
    let run = |w| {
        let cfg = SynthesisConfig {
            blend_frames: w,
            ..SynthesisConfig::default()
        };
        generate(&fx.graph, &fx.music.view(), &fx.model, 10_000, &cfg).unwrap()
    };
    let (hard, soft) = (run(0), run(8));
    let (a, b) = (seam_stats(&hard.transitions), seam_stats(&soft.transitions));
    assert!(a.mean_pre > 0.0);
    assert!(b.mean_post <= 0.5 * a.mean_post, "{} vs {}", b.mean_post, a.mean_post);
    // Without blending the measured post-seam residual is the raw one.
    for t in &hard.transitions {
        assert!((t.pre - t.post).abs() < 1e-12);
    }
    // Blending never makes the biggest frame step worse.
    let steps = |m: &motionrag_core::MotionClip| {
        frame_steps(&forward_kinematics(&fx.graph.skeleton().clone(), m).unwrap())
            .into_iter()
            .fold(0.0, f64::max)
    };
    assert!(steps(&soft.motion) <= steps(&hard.motion));
}

#[test]
fn unblended_output_replays_node_windows() {
    let fx = support::fixture();
    let cfg = SynthesisConfig {
        blend_frames: 0,
        ..SynthesisConfig::default()
    };
    let t = generate(&fx.graph, &fx.music.view(), &fx.model, 600, &cfg).unwrap();
    let mut f = 0;
    for &n in &t.nodes {
        let clip = &fx.graph.node(n).clip;
        let k = clip.frames().min(600 - f);
        for i in 0..k {
            let (a, b) = (t.motion.frame(f + i), clip.frame(i));
            assert_eq!(a.rot, b.rot);
            // Each window is rigidly translated to continue from the last.
            let first = t.motion.frame(f);
            let c0 = clip.frame(0);
            for d in 0..3 {
                assert!(((a.root[d] - b.root[d]) - (first.root[d] - c0.root[d])).abs() < 1e-9);
            }
        }
        f += k;
    }
    assert_eq!(f, 600);
}
