use super::*;
use crate::domain::{default_catalog, groups, LabCatalog, PatientRecord};
use crate::synthgen::{generate, GeneratorConfig};

fn cohort(n: usize) -> (Vec<PatientRecord>, LabCatalog) {
    let c = default_catalog();
    let mut cfg = GeneratorConfig::default_for(&c);
    cfg.n_patients = n;
    (generate(&cfg, &c).unwrap().patients, c)
}

fn tiny<F: Float>(d: usize, blocks: usize, max_len: usize) -> (EncoderParams<F>, Vec<PatientRecord>) {
    let (ps, c) = cohort(100);
    let vocab = Vocab::fit(&c, &ps, 8, max_len).unwrap();
    let cfg = EncoderConfig {
        d_model: d,
        n_blocks: blocks,
        n_heads: 2,
        d_ff: 2 * d,
        head_hidden: d,
    };
    (EncoderParams::init(cfg, vocab, 5).unwrap(), ps)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn cache_matches_tape_and_is_incremental() {
    let (p, ps) = tiny::<f64>(16, 2, 512);
    let rec = ps.iter().find(|r| r.observed.len() >= 2).unwrap();
    let seq = p.vocab.tokenize(Prefix::of(rec, 2)).unwrap();

    let mut tape = Tape::new();
    let vars: Vec<Var> = p.weights.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    let h = p.hidden_on_tape(&mut tape, &vars, &seq.ids).unwrap();
    let full = p.forward(&seq).unwrap();
    assert!(close(&tape.value(h).data, &full.hidden.data, 1e-10));

    let mut cache = EncoderCache::new(&p);
    let mut start = 0;
    for &e in &seq.eos_positions {
        let part = cache.extend(&seq.ids[start..=e]).unwrap();
        for i in 0..part.rows {
            assert!(close(part.row(i), full.hidden.row(start + i), 1e-10));
        }
        assert!(close(cache.last_hidden(), full.hidden.row(e), 1e-10));
        start = e + 1;
    }
}

#[test]
fn outputs_are_causal() {
    let (p, ps) = tiny::<f32>(16, 2, 512);
    let rec = ps.iter().find(|r| r.observed.len() >= 2).unwrap();
    let seq = p.vocab.tokenize(Prefix::full(rec)).unwrap();
    let base = p.forward(&seq).unwrap();
    let cut = seq.eos_positions[1];
    let mut ids = seq.ids.clone();
    ids[cut + 1..].reverse();
    let n = ids.len();
    ids[n - 1] = TRIAGE_GROUP;
    let other = p
        .forward(&TokenSeq {
            ids,
            eos_positions: vec![cut],
        })
        .unwrap();
    for i in 0..=cut {
        assert_eq!(base.hidden.row(i), other.hidden.row(i), "position {i}");
    }
}

#[test]
fn head_softmaxes_are_normalized() {
    let (p, ps) = tiny::<f32>(16, 1, 512);
    let seq = p.vocab.tokenize(Prefix::full(&ps[0])).unwrap();
    let out = p.forward(&seq).unwrap();
    for i in 0..out.next_logits.rows {
        let probs = masked_softmax(out.next_logits.row(i), None);
        assert!((probs.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        let o = masked_softmax(out.outcome_logits.row(i), None);
        assert!((o.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn zero_heads_give_uniform_next_group() {
    let (mut p, ps) = tiny::<f64>(8, 1, 512);
    let k = p.num_groups();
    let n = p.weights.len();
    for i in n - 8..n {
        p.weights.tensors[i].data.iter_mut().for_each(|x| *x = 0.0);
    }
    let seq = p.vocab.tokenize(Prefix::full(&ps[1])).unwrap();
    let out = p.forward(&seq).unwrap();
    let probs = masked_softmax(out.next_logits.row(0), None);
    for q in probs {
        assert!((q - 1.0 / k as f64).abs() < 1e-15);
    }
}

#[test]
fn too_long_is_an_error_not_a_truncation() {
    let (p, ps) = tiny::<f32>(8, 1, 60);
    let rec = ps.iter().find(|r| r.has_group(groups::CBC)).unwrap();
    let mut cache = EncoderCache::new(&p);
    let ids = p.vocab.tokenize(Prefix::of(rec, 0)).unwrap().ids;
    cache.extend(&ids).unwrap();
    let cbc = p.vocab.group_block(rec.result(groups::CBC).unwrap()).unwrap();
    assert!(matches!(cache.extend(&cbc), Err(EncoderError::TooLong { .. })));
}

fn sft_like_loss<'a>(
    p: &'a EncoderParams<f64>,
    rec: &PatientRecord,
) -> impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, EncoderError> + use<'a> {
    let seq = p.vocab.tokenize(Prefix::full(rec)).unwrap();
    let targets: Vec<usize> = rec.observed.iter().map(|r| r.group_id.index()).collect();
    move |tape, v| {
        let h = p.hidden_on_tape(tape, v, &seq.ids)?;
        let n = targets.len();
        let rows = tape.gather_rows(h, &seq.eos_positions);
        let next = p.head_on_tape(tape, v, Head::NextGroup, rows);
        let next = tape.gather_rows(next, &(0..n).collect::<Vec<_>>());
        let l_lab = tape.cross_entropy(next, &targets, &vec![1.0 / n as f64; n]);
        let last = tape.gather_rows(h, &[*seq.eos_positions.last().unwrap()]);
        let out = p.head_on_tape(tape, v, Head::Outcome, last);
        let l_y = tape.cross_entropy(out, &[1], &[3.0]);
        Ok(tape.sum(&[l_lab, l_y]))
    }
}

#[test]
fn central_differences_agree_on_every_tensor() {
    let (p, ps) = tiny::<f64>(8, 1, 128);
    let rec = ps
        .iter()
        .find(|r| r.observed.len() >= 2 && p.vocab.tokenize(Prefix::full(r)).is_ok())
        .unwrap();
    let report = check_gradients(&p.weights.tensors, 1e-4, sft_like_loss(&p, rec)).unwrap();
    assert_eq!(report.len(), p.weights.len());
    for r in report {
        assert!(
            r.max_rel_error < 1e-3,
            "{}: rel error {} at {}",
            p.weights.names[r.index],
            r.max_rel_error,
            r.worst_entry
        );
    }
}

#[test]
fn gradient_ignores_constants() {
    let (p, ps) = tiny::<f64>(8, 1, 512);
    let f = sft_like_loss(&p, &ps[0]);
    let (_, g1) = grad(&p.weights.tensors, &f).unwrap();
    let (_, g2) = grad(&p.weights.tensors, |t, v| {
        let l = f(t, v)?;
        Ok(t.add_const(l, 17.0))
    })
    .unwrap();
    assert_eq!(g1, g2);
}

#[test]
fn non_finite_loss_is_reported() {
    let (mut p, ps) = tiny::<f64>(8, 1, 512);
    p.weights.tensors[0].data.iter_mut().for_each(|x| *x = f64::NAN);
    let err = grad(&p.weights.tensors, sft_like_loss(&p, &ps[0])).unwrap_err();
    assert!(matches!(err, EncoderError::NonFinite(_)));
}

#[test]
fn weights_round_trip_bit_exact() {
    let (p, _) = tiny::<f32>(16, 2, 512);
    let c = default_catalog();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.edcp");
    p.save(&path).unwrap();
    let back = EncoderParams::load(&path, &c).unwrap();
    assert_eq!(back.config, p.config);
    assert_eq!(back.vocab, p.vocab);
    for (a, b) in back.weights.tensors.iter().zip(&p.weights.tensors) {
        let bits = |t: &Tensor<f32>| t.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(back.to_bytes(), p.to_bytes());
}

#[test]
fn corrupted_magic_and_foreign_catalog_are_refused() {
    let (p, _) = tiny::<f32>(8, 1, 512);
    let c = default_catalog();
    let mut bytes = p.to_bytes();
    bytes[0] = b'X';
    assert!(matches!(
        EncoderParams::from_bytes(&bytes, &c),
        Err(EncoderError::Format(_))
    ));
    let mut other = c.clone();
    other.groups[3].time_cost += 1;
    let err = EncoderParams::from_bytes(&p.to_bytes(), &other).unwrap_err().to_string();
    assert!(err.contains(&c.hash()) && err.contains(&other.hash()), "{err}");
}
