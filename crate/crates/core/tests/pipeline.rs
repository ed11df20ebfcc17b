mod common;

use std::sync::OnceLock;

use common::{build, distill_losses, tiny_config};
use ctdn::data::{Dataset, Split};
use ctdn::encoders::{encode_texts, project, PromptTemplate, TextEncoder, VisualEncoder};
use ctdn::nn::ParamStore;
use ctdn::pipeline::stage2::{pseudo_mask_for, CamModel};
use ctdn::pipeline::teacher::PRETRAIN_LOGIT_SCALE;
use ctdn::pipeline::*;
use ctdn::tensor::Mat;
use ctdn::CtdnError;
use proptest::prelude::*;

struct Trained {
    _dir: tempfile::TempDir,
    cfg: RunConfig,
    data: Dataset,
    teacher: VisualEncoder,
    text: TextEncoder,
}

/// One teacher shared by the tests in this file.
fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path(), 32, 160, 40);
        cfg.teacher.epochs = 12;
        cfg.teacher.lr = 1e-3;
        let data = build(&cfg);
        let out = pretrain_teacher(&cfg, &data).unwrap();
        Trained {
            _dir: dir,
            cfg,
            data,
            teacher: out.teacher,
            text: out.text,
        }
    })
}

fn with_run_dir(cfg: &RunConfig, dir: &tempfile::TempDir) -> RunConfig {
    let mut c = cfg.clone();
    c.run_dir = dir.path().to_path_buf();
    c
}

fn same_params(a: &ParamStore, b: &ParamStore, skip: &str) {
    for id in a.ids() {
        let name = a.name(id).to_string();
        if name.ends_with(skip) {
            continue;
        }
        assert_eq!(a.get(id), b.get(b.id_of(&name).unwrap()), "{name}");
    }
}

#[test]
fn zero_epoch_teacher_is_its_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path(), 32, 4, 0);
    cfg.teacher.epochs = 0;
    let data = build(&cfg);
    let out = pretrain_teacher(&cfg, &data).unwrap();
    let init = VisualEncoder::new(cfg.vit.clone(), "teacher", cfg.seed);
    same_params(&out.teacher.store, &init.store, "logit_scale");
    assert!((out.teacher.logit_scale().value() - PRETRAIN_LOGIT_SCALE).abs() < 1e-4);
    assert!(out.teacher.is_frozen() && out.text.is_frozen());
    let back = load_visual(&cfg.run_dir.join(TEACHER_CKPT)).unwrap();
    assert_eq!(back.store.checksum(), out.teacher.store.checksum());
}

#[test]
fn teacher_pretraining_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 32, 16, 0);
    let data = build(&cfg);
    let a = pretrain_teacher(&cfg, &data).unwrap();
    let b = pretrain_teacher(&cfg, &data).unwrap();
    assert_eq!(a.teacher.store.checksum(), b.teacher.store.checksum());
    assert_eq!(a.text.store.checksum(), b.text.store.checksum());
    assert_eq!(a.curves, b.curves);
    let c = pretrain_teacher(
        &RunConfig {
            seed: 1,
            ..cfg.clone()
        },
        &data,
    )
    .unwrap();
    assert_ne!(a.teacher.store.checksum(), c.teacher.store.checksum());
}

#[test]
fn pretrained_teacher_prefers_matched_phrases() {
    let t = trained();
    let classes: Vec<usize> = (0..t.data.num_classes()).collect();
    let texts = encode_texts(&t.text, &classes, &PromptTemplate::teacher())
        .unwrap()
        .vectors;
    let head = t.teacher.head();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for i in t.data.indices(Split::Val) {
        let f = t.teacher.encode(&t.data.images[i]).unwrap();
        let q = project(&Mat::row_vector(f.class_token()), &head).unwrap();
        let qn = q.data().iter().map(|v| v * v).sum::<f32>().sqrt();
        for c in &classes {
            let tr = texts.row(*c);
            let tn = tr.iter().map(|v| v * v).sum::<f32>().sqrt();
            let cos = q.data().iter().zip(tr).map(|(a, b)| a * b).sum::<f32>() / (qn * tn);
            if t.data.manifest.entries[i].labels.as_slice()[*c] == 1 {
                pos.push(cos);
            } else {
                neg.push(cos);
            }
        }
    }
    let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
    assert!(
        mean(&pos) > mean(&neg),
        "matched {} vs mismatched {}",
        mean(&pos),
        mean(&neg)
    );
}

#[test]
fn distillation_vanishes_at_student_init() {
    let t = trained();
    let student = VisualEncoder::student_from(&t.teacher, "student").unwrap();
    let cog: Vec<usize> = {
        let m = &t.data.manifest;
        let v = &t.text.phrases;
        m.cognition
            .fg
            .iter()
            .chain(&m.cognition.bg)
            .map(|p| v.id(p).unwrap())
            .collect()
    };
    let (p, pt) = (PromptTemplate::student(), PromptTemplate::teacher());
    for &i in t.data.indices(Split::Val).iter().take(5) {
        let img = &t.data.images[i];
        let (ct, vrd) = distill_losses(&student, &t.teacher, &t.text, &cog, img, &p, &p);
        assert!(ct.abs() < 1e-6 && vrd.abs() < 1e-6, "{ct} {vrd}");
        let (ct, vrd) = distill_losses(&student, &t.teacher, &t.text, &cog, img, &p, &pt);
        assert!(ct > 0.0, "differing prompts give {ct}");
        // the visual term has no text input
        assert!(vrd.abs() < 1e-6);
    }
}

#[test]
fn stage1_first_step_log() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = with_run_dir(&t.cfg, &dir);
    cfg.max_steps = 1;
    let out = train_stage1(&cfg, &t.data, &t.teacher, &t.text).unwrap();
    assert_eq!(out.steps, 1);
    assert!(out.curves["l_vrd"][0].abs() < 1e-6);
    assert!(out.curves["l_ct"][0] > 0.0);
    let log = std::fs::read_to_string(dir.path().join("stage1_log.txt")).unwrap();
    let (step, vals) = parse_log_line(log.lines().next().unwrap()).unwrap();
    assert_eq!(step, 0);
    for k in ["total", "l_rel", "l_ct", "l_vrd", "l_fbd", "lr"] {
        assert!(vals[k].is_finite(), "{k}");
    }
}

#[test]
fn zero_weights_reduce_to_relation_loss() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = with_run_dir(&t.cfg, &dir);
    cfg.max_steps = 6;
    cfg.loss.lambda1 = 0.0;
    cfg.loss.lambda2 = 0.0;
    cfg.loss.lambda3 = 0.0;
    let a = train_stage1(&cfg, &t.data, &t.teacher, &t.text).unwrap();
    for (tot, rel) in a.curves["total"].iter().zip(&a.curves["l_rel"]) {
        assert!((tot - rel).abs() <= 1e-6 * rel.abs().max(1.0));
    }
    for k in ["l_ct", "l_vrd", "l_fbd"] {
        assert_eq!(a.curves[k].len(), 6, "{k} logged");
    }
    // the other terms' settings must not influence training
    cfg.loss.delta = 0.3;
    cfg.fbd_projector = FbdProjector::Teacher;
    cfg.kl_order = ctdn::losses::KlOrder::TeacherFirst;
    let b = train_stage1(&cfg, &t.data, &t.teacher, &t.text).unwrap();
    assert_eq!(a.student.store.checksum(), b.student.store.checksum());
    assert_eq!(a.curves["l_rel"], b.curves["l_rel"]);
}

#[test]
fn stage1_is_deterministic_and_keeps_frozen_parts() {
    let t = trained();
    let sums = (t.teacher.store.checksum(), t.text.store.checksum());
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = with_run_dir(&t.cfg, &dir);
    cfg.max_steps = 4;
    let a = train_stage1(&cfg, &t.data, &t.teacher, &t.text).unwrap();
    let b = train_stage1(&cfg, &t.data, &t.teacher, &t.text).unwrap();
    assert_eq!(a.student.store.checksum(), b.student.store.checksum());
    assert_eq!(a.curves, b.curves);
    assert_eq!((t.teacher.store.checksum(), t.text.store.checksum()), sums);

    let mut thawed = t.teacher.clone();
    thawed.store.unfreeze_all();
    assert!(matches!(
        train_stage1(&cfg, &t.data, &thawed, &t.text),
        Err(CtdnError::MissingCheckpoint(_))
    ));
}

#[test]
fn single_image_overfits_relation_loss() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = with_run_dir(&t.cfg, &dir);
    // one image, full-image crops so its labels never change
    let mut data = t.data.clone();
    let keep = data.indices(Split::Train)[0];
    data.manifest.entries = vec![data.manifest.entries[keep].clone()];
    data.images = vec![data.images[keep].clone()];
    data.masks = vec![data.masks[keep].clone()];
    cfg.crop = cfg.image_size;
    cfg.train.batch_size = 1;
    cfg.train.epochs = 200;
    cfg.train.lr = 1e-3;
    cfg.loss.lambda1 = 0.0;
    cfg.loss.lambda2 = 0.0;
    cfg.loss.lambda3 = 0.0;
    // start from the nominal logit scale; the tiny teacher's learned one
    // caps how far the logits can separate within 200 steps
    let mut teacher = t.teacher.clone();
    let ls = teacher.vit.logit_scale;
    teacher.store.get_mut(ls).set(0, 0, 100f32.ln());
    let out = train_stage1(&cfg, &data, &teacher, &t.text).unwrap();
    assert_eq!(out.steps, 200);
    let last = *out.curves["l_rel"].last().unwrap();
    assert!(last < 0.05, "l_rel after 200 steps: {last}");
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = with_run_dir(&t.cfg, &dir);
    cfg.max_steps = 2;
    let out = train_stage1(&cfg, &t.data, &t.teacher, &t.text).unwrap();
    let path = dir.path().join(STUDENT_CKPT);
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.step(), 2);
    assert!(!ck.optimizer_state().is_empty());
    assert_eq!(ck.config().unwrap().unwrap(), cfg);
    let back = load_visual(&path).unwrap();
    for &i in t.data.indices(Split::Val).iter().take(3) {
        let a = out.student.encode(&t.data.images[i]).unwrap();
        let b = back.encode(&t.data.images[i]).unwrap();
        let d = a
            .tokens
            .data()
            .iter()
            .zip(b.tokens.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max);
        assert!(d <= 1e-6, "{d}");
    }
    std::fs::write(dir.path().join("bad.ckpt"), b"garbage").unwrap();
    assert!(Checkpoint::load(&dir.path().join("bad.ckpt")).is_err());
}

#[test]
fn bypassed_stage2_is_thresholded_cam_argmax() {
    let t = trained();
    let mut cfg = t.cfg.clone();
    cfg.crf.n_iters = 0;
    cfg.identity_affinity = true;
    cfg.use_box = false;
    let m = &t.data.manifest;
    let model = CamModel::new(&t.teacher, &t.text, &m.classes, &m.cognition.bg).unwrap();
    let k = m.num_classes();
    let tau = cfg.assemble.tau_fg;
    let gamma = cfg.assemble.gamma;
    for &i in t.data.indices(Split::Val).iter().take(6) {
        let present = m.entries[i].labels.present();
        if present.is_empty() {
            continue;
        }
        let img = &t.data.images[i];
        let (pm, cams, _) = pseudo_mask_for(&model, img, &present, k, &cfg).unwrap();
        let (h, w) = (img.height(), img.width());
        let up: Vec<Vec<f32>> = cams
            .iter()
            .map(|c| ctdn::cam::upsample_cam(c, h, w))
            .collect();
        for p in 0..h * w {
            let best = up
                .iter()
                .map(|u| u[p].clamp(0.0, 1.0))
                .fold(0.0f32, f32::max);
            let mut label = 0u8;
            let mut top = (1.0 - best).powf(gamma);
            for (u, &c) in up.iter().zip(&present) {
                if u[p].clamp(0.0, 1.0) > top {
                    top = u[p].clamp(0.0, 1.0);
                    label = (c + 1) as u8;
                }
            }
            if best < tau {
                label = 0;
            }
            assert_eq!(pm.labels[p], label, "image {i} pixel {p}");
        }
    }
}

#[test]
fn pseudo_masks_skip_empty_images_and_report() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_run_dir(&t.cfg, &dir);
    let mut data = t.data.clone();
    let val = data.indices(Split::Val);
    data.manifest.entries[val[0]].labels =
        ctdn::losses::ClassLabelVector::zeros(data.num_classes());
    let out_dir = dir.path().join("masks");
    let run = generate_pseudo_masks(&t.teacher, &t.text, &data, Split::Val, &cfg, Some(&out_dir))
        .unwrap();
    assert_eq!(run.skipped, vec![data.manifest.entries[val[0]].id.clone()]);
    assert_eq!(run.masks.len(), val.len() - 1);
    assert!(out_dir.join("report.txt").exists());
    let total: u64 = run.report.confusion.iter().flatten().sum();
    assert_eq!(
        total as usize,
        run.masks.len() * cfg.image_size * cfg.image_size
    );
    assert_eq!(run.report.per_class_iou.len(), data.num_classes() + 1);
    for (id, labels) in &run.masks {
        let (_, _, back) = ctdn::data::load_mask(&out_dir.join(format!("{id}.png"))).unwrap();
        assert_eq!(&back, labels);
    }
}

#[test]
fn segmenter_zero_epochs_and_missing_masks() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = with_run_dir(&t.cfg, &dir);
    let empty = dir.path().join("none");
    std::fs::create_dir_all(&empty).unwrap();
    match train_segmenter(Some(&empty), &t.data, &cfg, None) {
        Err(CtdnError::MissingMasks(ids)) => {
            assert_eq!(ids.len(), t.data.indices(Split::Train).len())
        }
        other => panic!("expected missing masks, got {:?}", other.err()),
    }
    cfg.seg.epochs = 0;
    cfg.seg_use_gt = true;
    let out = train_segmenter(None, &t.data, &cfg, None).unwrap();
    let mut g = ctdn::autograd::Graph::new();
    let img = &t.data.images[0];
    let z = out.segmenter.forward(&mut g, &out.store, &[img]);
    let k = out.segmenter.cfg.num_classes;
    for row in g.value(z).data().chunks(k) {
        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let s: f32 = row.iter().map(|v| (v - mx).exp()).sum();
        let pmax = 1.0 / s;
        assert!(pmax < 2.0 / k as f32, "max prob {pmax}");
    }
}

#[test]
fn segmenter_overfits_five_images_and_round_trips() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = with_run_dir(&t.cfg, &dir);
    cfg.seg_use_gt = true;
    cfg.seg_train_limit = 5;
    cfg.seg.batch_size = 5;
    cfg.seg.epochs = 300;
    cfg.seg.lr = 3e-3;
    cfg.segmenter.base_channels = 16;
    let out = train_segmenter(None, &t.data, &cfg, None).unwrap();
    let train: Vec<usize> = t.data.indices(Split::Train).into_iter().take(5).collect();
    let imgs: Vec<_> = train.iter().map(|&i| &t.data.images[i]).collect();
    let pred = predict_masks(&out.segmenter, &out.store, &imgs);
    let gt: Vec<Vec<u8>> = train.iter().map(|&i| t.data.masks[i].clone()).collect();
    let r = evaluate_miou(&pred, &gt, t.data.num_classes()).unwrap();
    assert!(r.miou > 0.9, "train mIoU {}", r.miou);

    let (seg, store) = load_segmenter(&dir.path().join(SEGMENTER_CKPT)).unwrap();
    assert_eq!(predict_masks(&seg, &store, &imgs), pred);
}

fn loop_iou(pred: &[u8], gt: &[u8], c: u8) -> Option<f64> {
    let mut inter = 0;
    let mut union = 0;
    for (&p, &g) in pred.iter().zip(gt) {
        if p == c && g == c {
            inter += 1;
        }
        if p == c || g == c {
            union += 1;
        }
    }
    (union > 0).then(|| inter as f64 / union as f64)
}

proptest! {
    #[test]
    fn miou_matches_loop_oracle(pairs in prop::collection::vec((0u8..4, 0u8..4), 1..200)) {
        let pred: Vec<u8> = pairs.iter().map(|p| p.0).collect();
        let gt: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        let r = evaluate_miou(std::slice::from_ref(&pred), std::slice::from_ref(&gt), 3).unwrap();
        let mut sum = 0.0;
        let mut n = 0;
        for c in 0..4u8 {
            let want = loop_iou(&pred, &gt, c);
            prop_assert_eq!(r.per_class_iou[c as usize].is_some(), want.is_some());
            if let (Some(a), Some(b)) = (r.per_class_iou[c as usize], want) {
                prop_assert!((a - b).abs() < 1e-12);
                sum += b;
                n += 1;
            }
        }
        prop_assert!((r.miou - sum / n as f64).abs() < 1e-12);
        prop_assert_eq!(r.confusion.iter().flatten().sum::<u64>() as usize, pred.len());
    }
}

#[test]
fn miou_rejects_bad_input() {
    assert!(evaluate_miou(&[vec![0, 1]], &[vec![0]], 2).is_err());
    assert!(evaluate_miou(&[vec![0, 5]], &[vec![0, 1]], 2).is_err());
    assert!(evaluate_miou(&[vec![0]], &[], 2).is_err());
}
