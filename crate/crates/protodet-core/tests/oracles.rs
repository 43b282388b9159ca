//! Worked examples checked against values computed independently of the
//! library: by hand, by explicit loops, or by central differences.

use approx::assert_abs_diff_eq;
use protodet_core::bbox::{apply_deltas, BBox};
use protodet_core::episode::{mask_for, sample_kshot, AnnotatedImage, ImageSource, Instance, SupportEntry};
use protodet_core::eval::{average_precision, iou, match_detections, DetectionRecord, GroundTruth, PRCurve};
use protodet_core::graph::{
    build_adjacency, random_adjacency, row_normalize, AliasTable, CategorySet, MetaGraph, WordEmbeddingTable,
};
use protodet_core::head::{
    detection_loss, head_forward, match_probability, predict, PredictorHead, RoIFeature, RoiTarget,
};
use protodet_core::proto::{gcn_forward, meta_loss, pool_support, transfer, ProtoTransferNet, PrototypeSet};
use protodet_core::{grad_check, SgdState, Tape, Tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_hand_dot_products() {
    let mut tape = Tape::new();
    let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let b = tape.leaf(&t(&[2, 1], &[2.0, 1.0])).unwrap();
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c), &[1.0 * 2.0 + 2.0 * 1.0, 3.0 * 2.0 + 4.0 * 1.0]);
}

/// Central difference of a scalar function of one coordinate.
fn numeric(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    let h = 1e-6;
    (f(x + h) - f(x - h)) / (2.0 * h)
}

#[test]
fn relu_gradient_matches_finite_differences() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[2], &[-1.0, 3.0]).with_grad()).unwrap();
    let r = tape.relu(x).unwrap();
    let s = tape.sum(r).unwrap();
    let g = tape.backward(s).unwrap();
    let relu = |v: f64| v.max(0.0);
    let gx = g.get(x).unwrap();
    assert_abs_diff_eq!(gx[0], numeric(relu, -1.0), epsilon = 1e-8);
    assert_abs_diff_eq!(gx[1], numeric(relu, 3.0), epsilon = 1e-8);
}

#[test]
fn product_gradient_matches_finite_differences() {
    let mut tape = Tape::new();
    let a = tape.leaf(&t(&[1], &[2.0]).with_grad()).unwrap();
    let b = tape.leaf(&t(&[1], &[3.0]).with_grad()).unwrap();
    let p = tape.mul(a, b).unwrap();
    let s = tape.sum(p).unwrap();
    let g = tape.backward(s).unwrap();
    assert_abs_diff_eq!(g.get(a).unwrap()[0], numeric(|x| x * 3.0, 2.0), epsilon = 1e-8);
}

#[test]
fn mean_rows_gradient_is_quarter() {
    let x0 = t(&[4, 3], &[0.3, -1.0, 2.0, 0.5, 0.5, 0.1, 1.0, 2.0, 3.0, -4.0, 0.0, 7.0]);
    let mut tape = Tape::new();
    let x = tape.leaf(&x0.clone().with_grad()).unwrap();
    let m = tape.mean_rows(x).unwrap();
    let s = tape.sum(m).unwrap();
    let g = tape.backward(s).unwrap();
    let f = |k: usize, v: f64| {
        let mut d = x0.data().to_vec();
        d[k] = v;
        d.iter().sum::<f64>() / 4.0
    };
    for (k, gv) in g.get(x).unwrap().iter().enumerate() {
        assert_abs_diff_eq!(*gv, numeric(|v| f(k, v), x0.data()[k]), epsilon = 1e-8);
        assert_abs_diff_eq!(*gv, 0.25, epsilon = 1e-15);
    }
}

#[test]
fn cross_entropy_log_sum_exp() {
    let mut tape = Tape::new();
    let l = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0])).unwrap();
    let ce = tape.softmax_cross_entropy(l, 2).unwrap();
    let lse = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
    assert_abs_diff_eq!(tape.scalar(ce), lse - 3.0, epsilon = 1e-12);
    assert_abs_diff_eq!(tape.scalar(ce), 0.407606, epsilon = 1e-6);
}

#[test]
fn smooth_l1_linear_branch() {
    let mut tape = Tape::new();
    let p = tape.leaf(&t(&[1, 4], &[2.0, 0.0, 0.0, 0.0])).unwrap();
    let z = tape.leaf(&t(&[1, 4], &[0.0; 4])).unwrap();
    let l = tape.smooth_l1(p, z).unwrap();
    assert_abs_diff_eq!(tape.scalar(l), 2.0 - 0.5, epsilon = 1e-15);
}

#[test]
fn momentum_recursion() {
    let mut sgd = SgdState::new(0.01, 0.9, 0.0);
    let mut w = t(&[1], &[0.0]).with_grad();
    let (mut v, mut x) = (0.0, 0.0);
    for expected in [-0.01, -0.029] {
        w.accumulate_grad(&[1.0]).unwrap();
        sgd.step([("w", &mut w)]).unwrap();
        v = 0.9 * v + 1.0;
        x -= 0.01 * v;
        assert_abs_diff_eq!(w.data()[0], x, epsilon = 1e-15);
        assert_abs_diff_eq!(w.data()[0], expected, epsilon = 1e-15);
    }
}

#[test]
fn motorbike_alias() {
    let a = AliasTable::default();
    assert_eq!(a.category_token("mbike").unwrap(), "motorbike");
    assert_eq!(a.canonical_name("motorbike").unwrap(), "mbike");
}

fn pair() -> CategorySet {
    CategorySet::new(vec!["cow".into(), "bird".into()], vec![false, true], 1).unwrap()
}

#[test]
fn cosine_of_axis_and_diagonal() {
    let mut table = WordEmbeddingTable::default();
    table.insert("cow", vec![1.0, 0.0]).unwrap();
    table.insert("bird", vec![1.0, 1.0]).unwrap();
    let g = build_adjacency(&table, &pair(), &AliasTable::default()).unwrap();
    assert_abs_diff_eq!(g.adjacency().get(0, 1), 1.0 / 2f64.sqrt(), epsilon = 1e-15);
    assert_eq!(format!("{:.5}", g.adjacency().get(0, 1)), "0.70711");
}

#[test]
fn random_pair_normalisation() {
    for seed in 0..5 {
        let g = random_adjacency(&pair(), seed).unwrap();
        let u = g.adjacency().get(0, 1);
        let p = g.propagation();
        assert_abs_diff_eq!(p.get(0, 0), 1.0 / (1.0 + u), epsilon = 1e-15);
        assert_abs_diff_eq!(p.get(0, 1), u / (1.0 + u), epsilon = 1e-15);
        assert_abs_diff_eq!(p.get(1, 0), u / (1.0 + u), epsilon = 1e-15);
        assert_abs_diff_eq!(p.get(1, 1), 1.0 / (1.0 + u), epsilon = 1e-15);
    }
}

#[test]
fn row_normalize_hand_division() {
    let p = row_normalize(&t(&[2, 2], &[1.0, 3.0, 2.0, 2.0])).unwrap();
    assert_eq!(p.data(), &[1.0 / 4.0, 3.0 / 4.0, 2.0 / 4.0, 2.0 / 4.0]);
}

fn entry(category: usize, cells: &[f64], mask: &[u8]) -> SupportEntry {
    let d = cells.len() / mask.len();
    SupportEntry::new(category, t(&[mask.len(), d], cells), mask.to_vec(), (1, mask.len())).unwrap()
}

#[test]
fn pooled_prototype_is_mean_of_masked_means() {
    let cats = pair();
    let entries = [
        entry(0, &[1.0, 2.0, 3.0, 4.0, 9.0, 9.0], &[1, 1, 0]),
        entry(0, &[0.0, 0.0, 5.0, 5.0, 7.0, 1.0], &[0, 1, 1]),
        entry(0, &[2.0, 2.0, 8.0, 8.0, 8.0, 8.0], &[1, 0, 0]),
        entry(1, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0], &[1, 1, 1]),
    ];
    let mut tape = Tape::new();
    let p = pool_support(&mut tape, &entries, &cats, &[0, 1]).unwrap();
    let mut expect = [0.0; 2];
    for e in entries.iter().filter(|e| e.category == 0) {
        let on: Vec<usize> = (0..e.mask.len()).filter(|&k| e.mask[k] == 1).collect();
        for d in 0..2 {
            let m: f64 = on.iter().map(|&k| e.cells.get(k, d)).sum::<f64>() / on.len() as f64;
            expect[d] += m / 3.0;
        }
    }
    assert_abs_diff_eq!(tape.value(p)[0], expect[0], epsilon = 1e-14);
    assert_abs_diff_eq!(tape.value(p)[1], expect[1], epsilon = 1e-14);
}

#[test]
fn gcn_layer_hand_product() {
    let mut tape = Tape::new();
    let h = tape.leaf(&t(&[2, 2], &[2.0, 0.0, 0.0, 2.0])).unwrap();
    let prop = tape.leaf(&t(&[2, 2], &[0.5; 4])).unwrap();
    let theta = tape.leaf(&Tensor::identity(2)).unwrap();
    let out = gcn_forward(&mut tape, h, prop, theta, true).unwrap();
    assert_eq!(tape.value(out), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn single_category_transfer_is_a_perceptron_with_skip() {
    let mut rng = protodet_core::rng::stream(3, protodet_core::rng::Stream::Init);
    let mut net = ProtoTransferNet::init(1, 1, 1, &mut rng);
    net.layer1.weights = t(&[1, 1], &[0.7]).with_grad();
    net.layer2.weights = t(&[1, 1], &[-1.3]).with_grad();
    let relu = |x: f64| x.max(0.0);
    for p0 in [-2.0, -0.3, 0.4, 1.5] {
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape).unwrap();
        let x = tape.leaf(&t(&[1, 1], &[p0])).unwrap();
        let prop = tape.leaf(&t(&[1, 1], &[1.0])).unwrap();
        let p = transfer(&mut tape, x, prop, &vars).unwrap();
        let expect = relu(relu(p0 * 0.7) * -1.3 + p0);
        assert_abs_diff_eq!(tape.value(p)[0], expect, epsilon = 1e-15);
    }
}

#[test]
fn two_category_transfer_hand_product() {
    let mut rng = protodet_core::rng::stream(0, protodet_core::rng::Stream::Init);
    let mut net = ProtoTransferNet::init(2, 2, 2, &mut rng);
    net.layer1.weights = t(&[2, 2], &[1.0, 0.5, -0.5, 1.0]).with_grad();
    net.layer2.weights = t(&[2, 2], &[0.2, 0.0, 0.1, -0.3]).with_grad();
    let p0 = [[1.0, 2.0], [3.0, -1.0]];
    let a = [[0.75, 0.25], [0.25, 0.75]];
    let mm = |x: [[f64; 2]; 2], y: [[f64; 2]; 2]| {
        let mut o = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                o[i][j] = x[i][0] * y[0][j] + x[i][1] * y[1][j];
            }
        }
        o
    };
    let relu = |x: [[f64; 2]; 2]| x.map(|r| r.map(|v: f64| v.max(0.0)));
    let th1 = [[1.0, 0.5], [-0.5, 1.0]];
    let th2 = [[0.2, 0.0], [0.1, -0.3]];
    let h1 = relu(mm(mm(a, p0), th1));
    let pre = mm(mm(a, h1), th2);
    let mut expect = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            expect[i][j] = (pre[i][j] + p0[i][j]).max(0.0);
        }
    }
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape).unwrap();
    let x = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, -1.0])).unwrap();
    let prop = tape.leaf(&t(&[2, 2], &[0.75, 0.25, 0.25, 0.75])).unwrap();
    let p = transfer(&mut tape, x, prop, &vars).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            assert_abs_diff_eq!(tape.value(p)[i * 2 + j], expect[i][j], epsilon = 1e-14);
        }
    }
}

#[test]
fn meta_loss_uniform_and_mixed() {
    let ln5 = 5f64.ln();
    let mut tape = Tape::new();
    let uni = tape.leaf(&t(&[5, 5], &[0.0; 25])).unwrap();
    let l = meta_loss(&mut tape, uni, Some(uni)).unwrap();
    assert_abs_diff_eq!(tape.scalar(l), ln5, epsilon = 1e-12);
    assert_abs_diff_eq!(tape.scalar(l), 1.6094, epsilon = 1e-4);

    let mut perfect = vec![-1e3; 25];
    for i in 0..5 {
        perfect[i * 5 + i] = 1e3;
    }
    let mut tape = Tape::new();
    let good = tape.leaf(&t(&[5, 5], &perfect)).unwrap();
    let uni = tape.leaf(&t(&[5, 5], &[0.0; 25])).unwrap();
    let l = meta_loss(&mut tape, good, Some(uni)).unwrap();
    assert_abs_diff_eq!(tape.scalar(l), (0.0 + ln5) / 2.0, epsilon = 1e-12);
}

fn toy_head() -> PredictorHead {
    PredictorHead {
        cls_weight: t(&[2, 2], &[1.0, -1.0, 0.5, 0.25]).with_grad(),
        cls_bias: t(&[2], &[0.1, -0.1]).with_grad(),
        box_weight: t(&[2, 4], &[0.1, 0.0, 0.0, 0.2, 0.0, 0.3, -0.1, 0.0]).with_grad(),
        box_bias: t(&[4], &[0.0; 4]).with_grad(),
        threshold: 0.5,
    }
}

#[test]
fn prediction_matches_hand_softmax() {
    let head = toy_head();
    let protos = PrototypeSet {
        preliminary: t(&[2, 2], &[1.0, 0.0, 0.5, 2.0]),
        refined: Some(t(&[2, 2], &[1.0, 0.0, 0.5, 2.0])),
        categories: vec![0, 1],
    };
    let roi = RoIFeature {
        vector: vec![2.0, -1.0],
        proposal: BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
        assignment: None,
    };
    let (scores, _) = predict(&roi, &protos, &head).unwrap();
    let roi = [2.0, -1.0];
    let proto = [[1.0, 0.0], [0.5, 2.0]];
    for c in 0..2 {
        let rw = [roi[0] * proto[c][0], roi[1] * proto[c][1]];
        let m: f64 = rw[0] + rw[1] * 0.5 + 0.1;
        let b: f64 = -rw[0] + rw[1] * 0.25 - 0.1;
        let p = m.exp() / (m.exp() + b.exp());
        assert_abs_diff_eq!(scores[c], p, epsilon = 1e-14);
        assert_abs_diff_eq!(match_probability(m, b), p, epsilon = 1e-14);
    }
}

#[test]
fn delta_decoding_hand_values() {
    let b = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
    let w = apply_deltas(&b, &[0.0, 0.0, 2f64.ln(), 0.0]);
    assert_abs_diff_eq!(w.width(), 20.0, epsilon = 1e-12);
    assert_abs_diff_eq!(w.center().0, 5.0, epsilon = 1e-12);
    let s = apply_deltas(&b, &[1.0, 0.0, 0.0, 0.0]);
    assert_abs_diff_eq!(s.center().0, 15.0, epsilon = 1e-12);
    assert_abs_diff_eq!(s.width(), 10.0, epsilon = 1e-12);
}

#[test]
fn two_roi_loss_is_hand_sum() {
    let head = toy_head();
    let protos = [1.0, 0.0, 0.5, 2.0];
    let rois = [2.0, -1.0, 0.5, 1.0];
    let target = [0.1, -0.2, 0.0, 0.3];
    let mut tape = Tape::new();
    let hv = head.bind(&mut tape).unwrap();
    let r = tape.leaf(&t(&[2, 2], &rois)).unwrap();
    let p = tape.leaf(&t(&[2, 2], &protos)).unwrap();
    let (logits, deltas) = head_forward(&mut tape, r, p, &hv).unwrap();
    let meta = tape.leaf(&t(&[1], &[0.75])).unwrap();
    let targets = [
        RoiTarget::Foreground {
            branch: 1,
            deltas: Some(target),
        },
        RoiTarget::Background,
    ];
    let terms = detection_loss(&mut tape, logits, deltas, &targets, 2, meta).unwrap();
    let v = terms.values(&tape);

    let w = [[1.0, -1.0], [0.5, 0.25]];
    let bias = [0.1, -0.1];
    let bw = [[0.1, 0.0, 0.0, 0.2], [0.0, 0.3, -0.1, 0.0]];
    let logit = |i: usize, c: usize| {
        let x = [rois[i * 2] * protos[c * 2], rois[i * 2 + 1] * protos[c * 2 + 1]];
        [0, 1].map(|o| x[0] * w[0][o] + x[1] * w[1][o] + bias[o])
    };
    let ce = |l: [f64; 2], y: usize| (l[0].exp() + l[1].exp()).ln() - l[y];
    let fg = ce(logit(0, 1), 0);
    let score = |l: [f64; 2]| l[0].exp() / (l[0].exp() + l[1].exp());
    let bg_branch = if score(logit(1, 1)) > score(logit(1, 0)) { 1 } else { 0 };
    let bg = ce(logit(1, bg_branch), 1);
    let l_cls = (fg + bg) / 2.0;
    let x = [rois[0] * protos[2], rois[1] * protos[3]];
    let mut l_box = 0.0;
    for o in 0..4 {
        let d: f64 = x[0] * bw[0][o] + x[1] * bw[1][o] - target[o];
        l_box += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
    }
    assert_abs_diff_eq!(v.l_cls, l_cls, epsilon = 1e-14);
    assert_abs_diff_eq!(v.l_box, l_box, epsilon = 1e-14);
    assert_abs_diff_eq!(v.l_meta, 0.75, epsilon = 1e-15);
    assert_abs_diff_eq!(v.total, l_cls + l_box + 0.75, epsilon = 1e-14);
}

#[test]
fn half_image_mask_rasterisation() {
    let b = BBox::new(0.0, 0.0, 50.0, 100.0).unwrap();
    let m = mask_for(&b, (100.0, 100.0), (4, 4));
    let mut expect = vec![0u8; 16];
    for r in 0..4 {
        for c in 0..2 {
            expect[r * 4 + c] = 1;
        }
    }
    assert_eq!(m, expect);
}

#[test]
fn kshot_recount_from_selection_log() {
    let cats = pair();
    let inst = |c: usize, x: f64| Instance {
        category: c,
        bbox: BBox::new(x, 0.0, x + 5.0, 5.0).unwrap(),
    };
    let pool: Vec<AnnotatedImage> = vec![
        AnnotatedImage::new(
            "two".into(),
            50.0,
            50.0,
            vec![inst(1, 0.0), inst(1, 10.0)],
            ImageSource::Synthetic,
        )
        .unwrap(),
        AnnotatedImage::new(
            "a".into(),
            50.0,
            50.0,
            vec![inst(1, 0.0), inst(0, 20.0)],
            ImageSource::Synthetic,
        )
        .unwrap(),
        AnnotatedImage::new(
            "b".into(),
            50.0,
            50.0,
            vec![inst(1, 0.0), inst(1, 30.0)],
            ImageSource::Synthetic,
        )
        .unwrap(),
        AnnotatedImage::new("c".into(), 50.0, 50.0, vec![inst(0, 0.0)], ImageSource::Synthetic).unwrap(),
    ];
    for seed in 0..50 {
        let sel = sample_kshot(&pool, &cats, &[1], 3, seed).unwrap();
        let mut recount = 0;
        for r in &sel.selected {
            assert_eq!(pool[r.image].instances[r.instance].category, 1);
            recount += 1;
        }
        assert_eq!(recount, 3);
        let drawn: usize = sel.images.iter().map(|&i| pool[i].count(1)).sum();
        assert_eq!(drawn, sel.selected.len() + sel.masked.len());
    }
}

#[test]
fn iou_hand_areas() {
    let a = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
    let b = BBox::new(5.0, 0.0, 15.0, 10.0).unwrap();
    assert_abs_diff_eq!(iou(&a, &b), 50.0 / 150.0, epsilon = 1e-15);
}

#[test]
fn envelope_integration() {
    let ap = average_precision(&PRCurve::new(vec![true, false, true], 2)).unwrap();
    assert_abs_diff_eq!(ap, 1.0 * 0.5 + (2.0 / 3.0) * 0.5, epsilon = 1e-15);
    assert_abs_diff_eq!(ap, 0.8333, epsilon = 1e-4);
}

#[test]
fn greedy_matching_small_oracle() {
    let gt = |x: f64| GroundTruth {
        image: 0,
        bbox: BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(),
    };
    let det = |x: f64, c: f64| DetectionRecord {
        image: 0,
        confidence: c,
        bbox: BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(),
    };
    let gts = [gt(0.0), gt(3.0), gt(40.0)];
    let dets = [
        det(1.0, 0.9),
        det(2.0, 0.8),
        det(2.5, 0.7),
        det(40.0, 0.6),
        det(80.0, 0.5),
    ];
    // 0.9 takes the closer of the first two, 0.8 the remaining one, 0.7 finds both claimed.
    assert_eq!(match_detections(&dets, &gts), vec![true, true, false, true, false]);
}

#[test]
fn five_category_mean_at_one_decimal() {
    let aps = [40.5, 50.8, 59.1, 45.5, 34.9];
    let cats = CategorySet::new((0..5).map(|i| format!("n{i}")).collect(), vec![true; 5], 1).unwrap();
    let r = protodet_core::eval::mean_ap(&aps.map(Some), &cats);
    assert_eq!((r.novel.unwrap() * 10.0).round() / 10.0, 46.2);
}

#[test]
fn twenty_categories_per_split() {
    for split in 1..=3 {
        let c = CategorySet::voc_split(split).unwrap();
        assert_eq!(c.len(), 20);
        assert_eq!(c.novel_indices().len(), 5);
    }
}

#[test]
fn meta_graph_rejects_bad_shapes() {
    assert!(MetaGraph::from_adjacency(t(&[2, 3], &[0.0; 6]), vec!["a".into(), "b".into()]).is_err());
}

#[test]
fn full_pipeline_loss_gradient_on_three_categories() {
    let cats = CategorySet::new(vec!["a".into(), "b".into(), "c".into()], vec![false, false, true], 1).unwrap();
    let mut rng = protodet_core::rng::stream(11, protodet_core::rng::Stream::Init);
    let net = ProtoTransferNet::init(3, 3, 3, &mut rng);
    let head = PredictorHead::init(3, 0.5, &mut rng);
    let entries = [
        entry(0, &[0.5, 1.0, 0.2, 0.1, 0.3, 0.9], &[1, 1]),
        entry(1, &[1.5, 0.1, 0.7, 0.8, 0.2, 0.4], &[1, 0]),
        entry(2, &[0.3, 0.6, 1.1, 0.9, 0.5, 0.2], &[0, 1]),
    ];
    let adj = t(&[3, 3], &[1.0, 0.4, 0.2, 0.4, 1.0, 0.6, 0.2, 0.6, 1.0]);
    let prop = row_normalize(&adj).unwrap();
    let rois = t(&[3, 3], &[0.9, 0.2, 0.4, 0.1, 1.2, 0.3, 0.6, 0.5, 0.8]);
    let targets = [
        RoiTarget::Foreground {
            branch: 0,
            deltas: Some([0.1, -0.1, 0.05, 0.2]),
        },
        RoiTarget::Background,
        RoiTarget::Foreground {
            branch: 2,
            deltas: Some([-0.2, 0.1, 0.0, -0.05]),
        },
    ];
    let point = vec![
        net.layer1.weights.clone(),
        net.layer2.weights.clone(),
        net.projection.clone(),
        net.classifier.clone(),
        head.cls_weight.clone(),
        head.cls_bias.clone(),
        head.box_weight.clone(),
        head.box_bias.clone(),
    ];
    let err = grad_check(
        &point,
        |tape, v| {
            let p0 = pool_support(tape, &entries, &cats, &[0, 1, 2])?;
            let pr = tape.leaf(&prop)?;
            let vars = protodet_core::proto::NetVars {
                layer1: v[0],
                layer2: v[1],
                residual: None,
                projection: v[2],
                classifier: v[3],
            };
            let p = transfer(tape, p0, pr, &vars)?;
            let (refined, prelim) = protodet_core::proto::meta_logits(tape, p0, p, &vars, None)?;
            let meta = meta_loss(tape, refined, Some(prelim))?;
            let r = tape.leaf(&rois)?;
            let hv = protodet_core::head::HeadVars {
                cls_weight: v[4],
                cls_bias: v[5],
                box_weight: v[6],
                box_bias: v[7],
            };
            let (logits, deltas) = head_forward(tape, r, p, &hv)?;
            Ok(detection_loss(tape, logits, deltas, &targets, 3, meta)?.total)
        },
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}
