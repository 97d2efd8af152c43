use super::*;
use crate::treebank::{random_binary_tree, Sequence};
use rand::Rng;

fn tiny(mode: Mode, head: AttachHeadKind) -> ModelConfig {
    let mut c = ModelConfig::pushdown(2, 2, 8, 7, 16, 5).with_mode(mode);
    c.attach_head = head;
    c
}

fn random_sequence(rng: &mut ChaCha8Rng, words: usize, vocab: usize) -> Sequence {
    let tree = random_binary_tree(words, rng);
    let ids: Vec<usize> = (0..words).map(|_| rng.gen_range(2..vocab)).collect();
    Sequence::from_tree(&ids, &tree)
}

fn random_batch(rng: &mut ChaCha8Rng, sizes: &[usize], vocab: usize) -> Batch {
    let seqs: Vec<Sequence> = sizes
        .iter()
        .map(|&n| random_sequence(rng, n, vocab))
        .collect();
    Batch::from_sequences(&seqs.iter().collect::<Vec<_>>()).unwrap()
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn set(model: &mut PushdownModel, name: &str, data: &[f64]) {
    let id = model
        .params
        .find(name)
        .unwrap_or_else(|| panic!("no param {name}"));
    model.params.get_mut(id).data_mut().copy_from_slice(data);
}

#[test]
fn config_validation() {
    let ok = tiny(Mode::Pushdown, AttachHeadKind::Mlp);
    assert!(ok.validate().is_ok());
    assert!(ModelConfig {
        heads: 3,
        ..ok.clone()
    }
    .validate()
    .is_err());
    assert!(ModelConfig {
        mode: Mode::BasePlain,
        ..ok.clone()
    }
    .validate()
    .is_err());
    assert!(ModelConfig {
        pushdown_layers: vec![2],
        ..ok.clone()
    }
    .validate()
    .is_err());
    assert!(ModelConfig {
        pushdown_layers: vec![0, 0],
        ..ok.clone()
    }
    .validate()
    .is_err());
    assert!(ModelConfig { dropout: 1.0, ..ok }.validate().is_err());
}

#[test]
fn depth_tables_exist_only_in_pushdown_layers() {
    let mut c = tiny(Mode::Pushdown, AttachHeadKind::Mlp);
    c.pushdown_layers = vec![1];
    let m = PushdownModel::new(c, 0).unwrap();
    assert!(m.params.find("h0.attn.depth").is_none());
    assert_eq!(
        m.params
            .get(m.params.find("h1.attn.depth").unwrap())
            .shape(),
        &[6, 8]
    );
    let base = PushdownModel::new(tiny(Mode::BasePlain, AttachHeadKind::Mlp), 0).unwrap();
    assert!(base.depth_tables().is_empty());
    assert!(base.params.iter().all(|(n, _)| !n.starts_with("attach.")));
}

#[test]
fn zero_depth_tables_match_base_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for head in [AttachHeadKind::Mlp, AttachHeadKind::Bilinear] {
        let mut pd = PushdownModel::new(tiny(Mode::Pushdown, head), 3).unwrap();
        for id in pd.depth_tables() {
            pd.params.get_mut(id).data_mut().fill(0.0);
        }
        let mut base = PushdownModel::new(tiny(Mode::BaseMultitask, head), 4).unwrap();
        for id in base.params.ids().collect::<Vec<_>>() {
            let src = pd.params.find(base.params.name(id)).unwrap();
            let data = pd.params.get(src).data().to_vec();
            base.params.get_mut(id).data_mut().copy_from_slice(&data);
        }
        for _ in 0..20 {
            let sizes = [rng.gen_range(1..8), rng.gen_range(1..8)];
            let b = random_batch(&mut rng, &sizes, 7);
            let a = pd.forward_values(&b).unwrap();
            let c = base.forward_values(&b).unwrap();
            assert_eq!(bits(&a.lm_logits), bits(&c.lm_logits));
            assert_eq!(
                bits(a.attach_logits.as_ref().unwrap()),
                bits(c.attach_logits.as_ref().unwrap())
            );
            for (x, y) in a.attention.iter().zip(&c.attention) {
                assert_eq!(bits(x), bits(y));
            }
        }
    }
}

#[test]
fn hand_computed_attention_weights() {
    let mut c = ModelConfig::pushdown(1, 1, 2, 3, 4, 1);
    c.mode = Mode::Pushdown;
    let mut m = PushdownModel::new(c, 0).unwrap();
    set(&mut m, "wte", &[1.0, -1.0, -2.0, 2.0, 0.0, 0.0]);
    set(&mut m, "wpe", &[0.0; 8]);
    set(&mut m, "h0.attn.q.w", &[1.0, 0.0, 0.0, 1.0]);
    set(&mut m, "h0.attn.k.w", &[1.0, 0.0, 0.0, 1.0]);
    set(&mut m, "h0.attn.depth", &[0.0, 0.0, 0.5, 0.25]);
    let batch = Batch {
        batch: 1,
        len: 2,
        tokens: vec![0, 1],
        next_tokens: vec![1, 0],
        // row 1 is S[1] = [1, 0]
        tape: vec![0, 0, 1, 0],
        lm_targets: vec![Some(1), None],
        attach_targets: vec![Some(1), None],
        lengths: vec![2],
    };
    let att = &m.forward_values(&batch).unwrap().attention[0];
    // layer norm of [a, -a] is [a, -a] / sqrt(a² + eps)
    let u = 1.0 / (1.0f64 + 1e-5).sqrt();
    let v = 2.0 / (4.0f64 + 1e-5).sqrt();
    let scale = 1.0 / 2.0f64.sqrt();
    let s0 = (-v * (u + 0.5) + v * (-u + 0.25)) * scale;
    let s1 = 2.0 * v * v * scale;
    let p0 = 1.0 / (1.0 + (s1 - s0).exp());
    let d = att.data();
    assert_eq!(d[0], 1.0);
    assert_eq!(d[1], 0.0);
    assert!((d[2] - p0).abs() < 1e-12, "{} vs {p0}", d[2]);
    assert!((d[3] - (1.0 - p0)).abs() < 1e-12);
}

#[test]
fn attention_row_reads_only_its_own_tape_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut c = tiny(Mode::Pushdown, AttachHeadKind::Mlp);
    c.layers = 1;
    c.pushdown_layers = vec![0];
    c.init_std = 0.5;
    let m = PushdownModel::new(c, 2).unwrap();
    let base = random_batch(&mut rng, &[6], 7);
    let t = base.len;
    let before = m.forward_values(&base).unwrap();
    for k in 1..t {
        let mut b = base.clone();
        for j in 0..=k {
            b.tape[k * t + j] = (b.tape[k * t + j] + 1 + j) % 6;
        }
        let after = m.forward_values(&b).unwrap();
        let (a0, a1) = (before.attention[0].data(), after.attention[0].data());
        for h in 0..2 {
            for i in 0..t {
                let row = |x: &[f64]| x[(h * t + i) * t..(h * t + i + 1) * t].to_vec();
                if i == k {
                    assert_ne!(row(a0), row(a1));
                } else {
                    assert_eq!(row(a0), row(a1));
                }
            }
        }
    }
}

#[test]
fn tape_changes_only_affect_later_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut c = tiny(Mode::Pushdown, AttachHeadKind::Mlp);
    c.init_std = 0.5;
    c.max_depth = 12;
    let m = PushdownModel::new(c, 9).unwrap();
    let base = random_batch(&mut rng, &[6], 7);
    let (t, v) = (base.len, 7);
    let before = m.forward_values(&base).unwrap();
    for k in 0..t {
        for j in 0..=k {
            let mut b = base.clone();
            b.tape[k * t + j] += 1;
            let after = m.forward_values(&b).unwrap();
            let lm_a = before.lm_logits.data();
            let lm_b = after.lm_logits.data();
            assert_eq!(lm_a[..k * v], lm_b[..k * v]);
            // a lone key gets all the attention whatever its depth
            if k > 0 {
                assert_ne!(lm_a[k * v..], lm_b[k * v..]);
            }
            let at_a = before.attach_logits.as_ref().unwrap().data();
            let at_b = after.attach_logits.as_ref().unwrap().data();
            assert_eq!(at_a[..k * (t + 1)], at_b[..k * (t + 1)]);
        }
    }
}

#[test]
fn no_gradient_from_past_outputs_to_future_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut m = PushdownModel::new(tiny(Mode::Pushdown, AttachHeadKind::Mlp), 1).unwrap();
    let b = random_batch(&mut rng, &[6], 7);
    let (t, v, d) = (b.len, 7, 8);
    for i in 0..t {
        m.params.zero_grad();
        let mut g = Graph::new();
        let out = m.forward(&mut g, &b).unwrap();
        let w = Tensor::from_fn(&[1, t, v], |n| {
            if n / v == i {
                ((n % v) as f64 + 1.0) * 0.1
            } else {
                0.0
            }
        });
        let w = g.input(w);
        let y = g.mul(out.lm_logits, w).unwrap();
        let loss = g.sum(y);
        g.backward(loss, &mut m.params).unwrap();
        let wpe = m.params.get(m.params.find("wpe").unwrap()).grad().unwrap();
        for j in 0..t {
            let row = &wpe[j * d..(j + 1) * d];
            if j > i {
                assert!(row.iter().all(|&x| x == 0.0), "position {j} leaks into {i}");
            } else {
                assert!(row.iter().any(|&x| x != 0.0));
            }
        }
    }
}

#[test]
fn attention_rows_sum_to_one_and_attach_slots_are_masked() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = PushdownModel::new(tiny(Mode::Pushdown, AttachHeadKind::Mlp), 0).unwrap();
    let b = random_batch(&mut rng, &[5, 3], 7);
    let out = m.forward_values(&b).unwrap();
    let t = b.len;
    for a in &out.attention {
        for row in a.data().chunks(t) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    let att = out.attach_logits.unwrap();
    assert_eq!(att.shape(), &[2, t, t + 1]);
    for (r, row) in att.data().chunks(t + 1).enumerate() {
        let i = r % t;
        for (j, &x) in row.iter().enumerate() {
            assert_eq!(x.is_finite(), j <= i + 1, "row {i} slot {j}");
        }
    }
}

#[test]
fn zero_attach_head_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut m = PushdownModel::new(tiny(Mode::Pushdown, AttachHeadKind::Mlp), 0).unwrap();
    for id in m.params.ids().collect::<Vec<_>>() {
        if m.params.name(id).starts_with("attach.") {
            m.params.get_mut(id).data_mut().fill(0.0);
        }
    }
    let b = random_batch(&mut rng, &[5], 7);
    let att = m.forward_values(&b).unwrap().attach_logits.unwrap();
    let t = b.len;
    for (i, row) in att.data().chunks(t + 1).enumerate() {
        let mut p = vec![0.0; t + 1];
        crate::autodiff::kernels::softmax_masked_row(row, |j| j <= i + 1, &mut p);
        for &x in &p[..=i + 1] {
            assert!((x - 1.0 / (i + 2) as f64).abs() < 1e-15);
        }
        if i == 0 {
            assert_eq!(p.iter().filter(|&&x| x > 0.0).count(), 2);
        }
    }
}

#[test]
fn initial_loss_is_near_log_vocab() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let vocab = 42;
    let c = ModelConfig::pushdown(2, 2, 16, vocab, 40, 6);
    let m = PushdownModel::new(c, 11).unwrap();
    let b = random_batch(&mut rng, &[30, 24, 18, 30], vocab);
    let mut g = Graph::new();
    let out = m.forward(&mut g, &b).unwrap();
    let loss = m.loss(&mut g, &out, &b, 1.0).unwrap();
    let lm = g.value(loss.lm).item();
    assert!((lm - (vocab as f64).ln()).abs() < 0.1, "{lm}");
    // lambda = 0 leaves the LM loss alone
    let zero = m.loss(&mut g, &out, &b, 0.0).unwrap();
    assert_eq!(g.value(zero.total).item(), lm);
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut c = ModelConfig::pushdown(2, 2, 16, 9, 8, 4);
    c.init_std = 0.3;
    let mut m = PushdownModel::new(c, 5).unwrap();
    let b = random_batch(&mut rng, &[6, 4], 9);
    assert_eq!(b.len, 8);
    let loss_of = |m: &PushdownModel| -> f64 {
        let mut g = Graph::new();
        let out = m.forward(&mut g, &b).unwrap();
        let l = m.loss(&mut g, &out, &b, 0.7).unwrap();
        g.value(l.total).item()
    };
    {
        let mut g = Graph::new();
        let out = m.forward(&mut g, &b).unwrap();
        let l = m.loss(&mut g, &out, &b, 0.7).unwrap();
        g.backward(l.total, &mut m.params).unwrap();
    }
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for id in m.params.ids().collect::<Vec<_>>() {
        let analytic = m.params.get(id).grad().unwrap().to_vec();
        // every other entry keeps this test quick while touching every tensor
        for i in (0..analytic.len()).step_by(2) {
            let orig = m.params.get(id).data()[i];
            m.params.get_mut(id).data_mut()[i] = orig + eps;
            let up = loss_of(&m);
            m.params.get_mut(id).data_mut()[i] = orig - eps;
            let down = loss_of(&m);
            m.params.get_mut(id).data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let a = analytic[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
            assert!(
                rel < 1e-4,
                "{}[{i}]: analytic {a} vs fd {fd}",
                m.params.name(id)
            );
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn incremental_pass_is_bitwise_equal_to_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (mode, head) in [
        (Mode::Pushdown, AttachHeadKind::Mlp),
        (Mode::Pushdown, AttachHeadKind::Bilinear),
        (Mode::BaseMultitask, AttachHeadKind::Mlp),
        (Mode::BasePlain, AttachHeadKind::Mlp),
    ] {
        let mut c = tiny(mode, head);
        c.init_std = 0.3;
        let m = PushdownModel::new(c, 21).unwrap();
        let inf = m.inference();
        for _ in 0..5 {
            let n = rng.gen_range(1..10);
            let seq = random_sequence(&mut rng, n, 7);
            let b = Batch::from_sequences(&[&seq]).unwrap();
            let full = m.forward_values(&b).unwrap();
            let caches = inf.run(&seq.ids, &seq.r).unwrap();
            let (t, v) = (b.len, 7);
            let tape = seq.tape_matrix().unwrap();
            for k in 0..t {
                let lm = inf.lm_logits(&caches[k]);
                assert_eq!(
                    lm.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                    bits(
                        &Tensor::new(vec![v], full.lm_logits.data()[k * v..(k + 1) * v].to_vec())
                            .unwrap()
                    )
                );
                if let (Some(att), true) = (&full.attach_logits, k + 1 < t) {
                    let inc = inf
                        .attach_logits(&caches[..=k], tape.prefix_row(k), seq.ids[k + 1])
                        .unwrap();
                    let row = &att.data()[k * (t + 1)..k * (t + 1) + k + 2];
                    assert_eq!(
                        inc.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                        row.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
                    );
                }
            }
        }
    }
}

#[test]
fn unclamped_depth_beyond_table_is_an_error() {
    let mut c = tiny(Mode::Pushdown, AttachHeadKind::Mlp);
    c.max_depth = 1;
    c.clamp_depth = false;
    let m = PushdownModel::new(c.clone(), 0).unwrap();
    // right-branching over five words reaches depth 4
    let seq = Sequence::from_tree(
        &[2, 3, 4, 5, 6],
        &crate::treebank::enumerate_binary_trees(5)[0],
    );
    let b = Batch::from_sequences(&[&seq]).unwrap();
    assert!(matches!(
        m.forward_values(&b),
        Err(ModelError::DepthOutOfRange { max: 1, .. })
    ));
    c.clamp_depth = true;
    assert!(PushdownModel::new(c, 0).unwrap().forward_values(&b).is_ok());
}

#[test]
fn checkpoint_round_trip() {
    let m = PushdownModel::new(tiny(Mode::Pushdown, AttachHeadKind::Mlp), 7).unwrap();
    let vocab = crate::treebank::Vocab::from_tokens(["a", "b", "c", "d", "e"]);
    let bytes = write_checkpoint(&m, &vocab);
    let (back, v2) = read_checkpoint(&bytes).unwrap();
    assert_eq!(v2, vocab);
    assert_eq!(back.config, m.config);
    assert_eq!(back.params, m.params);
    assert!(matches!(
        read_checkpoint(&bytes[..bytes.len() - 3]),
        Err(CheckpointError::Format(_))
    ));
    let mut wrong = bytes.clone();
    wrong[8] = 9;
    assert!(matches!(
        read_checkpoint(&wrong),
        Err(CheckpointError::Version { found: 9, .. })
    ));
    let small = crate::treebank::Vocab::from_tokens(["a"]);
    assert!(read_checkpoint(&write_checkpoint(&m, &small)).is_err());
}
