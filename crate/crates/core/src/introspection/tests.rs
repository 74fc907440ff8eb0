use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::layer::ActVariant;
use crate::model::{ModelConfig, Readout};
use crate::tasks::Task;

fn model(variant: &str, act: Option<ActVariant>) -> (ParamStore<f32>, EncoderModel, Vocab) {
    let vocab = Task::Ctl.vocab();
    let mut c = ModelConfig::new(vocab.len(), vocab.n_classes(), variant.parse().unwrap());
    c.d_model = 16;
    c.d_ff = 32;
    c.n_heads = 2;
    c.n_layers = 3;
    c.test_steps = 3;
    c.act = act;
    let mut store = ParamStore::new();
    let m = EncoderModel::new(c, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    (store, m, vocab)
}

const INPUT: &str = "101 a c f";

#[test]
fn tracing_does_not_change_logits_and_has_expected_shapes() {
    for v in ["ndr", "standard", "relative", "rel_gate"] {
        let (store, m, vocab) = model(v, None);
        let trace = capture_text(&m, &store, &vocab, INPUT, 4).unwrap();
        let ids = vocab.encode(&INPUT.split(' ').collect::<Vec<_>>()).unwrap();
        let batch = Batch::new(&[&ids], Readout::Last).unwrap();
        let mut t = Tape::new();
        let p = store.bind(&mut t);
        let plain = m.forward(&mut t, &p, &batch, 4, None, false).unwrap();
        assert_eq!(t.value(plain.logits), trace.logits.as_slice(), "{v}");

        let a = &trace.attention;
        assert_eq!((a.steps, a.heads, a.len), (4, 2, 6));
        assert_eq!(a.weights.len(), 4 * 2 * 6 * 6);
        assert_eq!(trace.tokens, vec!["B", "101", "a", "c", "f", "E"]);
        for s in 0..4 {
            for h in 0..2 {
                for row in a.map(s, h).chunks(6) {
                    let sum: f32 = row.iter().sum();
                    if a.len > 0 && m.config.variant.attention.is_softmax() {
                        assert!((sum - 1.0).abs() < 1e-5, "{v}: {sum}");
                    } else {
                        assert!(sum <= 1.0 + 1e-5);
                    }
                }
            }
        }
        match &trace.gates {
            Some(g) => {
                assert_eq!(g.mean.len(), 4 * 6);
                assert!(g.full.iter().all(|x| (0.0..=1.0).contains(x)));
            }
            None => assert!(!m.config.variant.gated),
        }
    }
}

#[test]
fn closed_gate_trace_is_sigmoid_of_bias() {
    let (mut store, m, vocab) = model("ndr", None);
    let gate = m.layer.ffn_gate.unwrap();
    store.get_mut(gate.w2).tensor.data_mut().fill(0.0);
    let trace = capture_text(&m, &store, &vocab, INPUT, 3).unwrap();
    let expect = crate::substrate::sigmoid(-3.0f32);
    assert!(trace.gates.unwrap().full.iter().all(|&g| (g - expect).abs() < 1e-6));
}

#[test]
fn batched_input_is_rejected() {
    let (store, m, vocab) = model("ndr", None);
    let batch = Batch::new(&[&[3, 4], &[5]], Readout::Last).unwrap();
    assert!(capture(&m, &store, &vocab, &batch, 3).is_err());
    assert!(capture_text(&m, &store, &vocab, "101 zz", 3).is_err());
}

#[test]
fn export_round_trips_and_sizes_images() {
    let (store, m, vocab) = model("geometric", None);
    let trace = capture_text(&m, &store, &vocab, INPUT, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let index = export(&trace, dir.path()).unwrap();
    assert_eq!(read_trace(&dir.path().join("trace.json")).unwrap(), trace);
    assert_eq!(index.iter().filter(|a| a.kind == "attention").count(), 2 * 2);
    for p in artifact_paths(dir.path(), &index) {
        assert!(p.exists());
    }
    let (w, h, px) = pgm::decode(&std::fs::read(dir.path().join("att_t1_h0.pgm")).unwrap()).unwrap();
    assert_eq!((w, h, px.len()), (6, 6, 36));
    assert_eq!(px.iter().copied().max(), Some(255));
    let a = &trace.attention;
    let hm = a.head_max(1);
    for (i, &v) in hm.iter().enumerate() {
        assert_eq!(v, a.map(1, 0)[i].max(a.map(1, 1)[i]));
    }
    let (_, _, maxpx) = pgm::decode(&std::fs::read(dir.path().join("att_t2_max.pgm")).unwrap()).unwrap();
    assert_eq!(maxpx, pgm::decode(&pgm::encode(6, 6, &hm)).unwrap().2);
    assert!(dir.path().join("index.json").exists());
    assert!(!dir.path().join("gates.pgm").exists());
}

#[test]
fn pgm_scaling() {
    let img = pgm::encode(2, 2, &[0.0, 0.5, 1.0, 0.25]);
    assert_eq!(pgm::decode(&img).unwrap(), (2, 2, vec![0, 128, 255, 64]));
    assert_eq!(pgm::decode(&pgm::encode(1, 2, &[0.0, 0.0])).unwrap().2, vec![0, 0]);
    assert!(pgm::decode(b"P2\n1 1\n255\n\x00").is_err());
}

#[test]
fn ponder_report_needs_act_and_counts_certain_halts_as_one() {
    let ds = crate::tasks::generate(Task::Ctl, 0, &Task::Ctl.default_plan().scaled_down(50)).unwrap();
    let samples = ds.split(crate::tasks::SplitName::ValidIid);
    let (store, m, _) = model("ndr", None);
    assert!(ponder_report(&m, &store, samples, 3, 16).is_err());

    let (mut store, m, _) = model("ndr", Some(ActVariant::A));
    let act = m.act.unwrap();
    store.get_mut(act.w_h).tensor.data_mut().fill(0.0);
    store.get_mut(act.b_h).tensor.data_mut().fill(40.0);
    let rows = ponder_report(&m, &store, samples, 3, 16).unwrap();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.mean == 1.0 && r.std == 0.0));
    assert_eq!(rows.iter().map(|r| r.sequences).sum::<usize>(), samples.len());

    let (store, m, _) = model("ndr", Some(ActVariant::U));
    let a = ponder_report(&m, &store, samples, 5, 7).unwrap();
    let b = ponder_report(&m, &store, samples, 5, 16).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|r| r.mean <= 5.0 && r.max <= 5));
}

#[test]
fn gate_frontier() {
    let g = GateTrace {
        steps: 3,
        len: 2,
        d: 1,
        mean: vec![0.6, 0.1, 0.0, 0.3, 0.0, 0.3],
        full: vec![],
    };
    assert_eq!(g.frontier(0.5), vec![Some(0), Some(2)]);
    assert!(frontier_is_monotone(&g, 0.5));
}
