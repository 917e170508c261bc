#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use zlss::model::{backward, combined_loss, forward_backbone, project_probs, BackboneParams, Objective};
use zlss::{EmbeddingTable, Image, LabelMask, LabelSpace};

/// A small random training problem for gradient checks.
pub struct Instance {
    pub image: Image,
    pub params: BackboneParams,
    pub table: EmbeddingTable,
    pub objective: Objective,
    pub y: LabelMask,
    pub ybar: LabelMask,
    pub space: LabelSpace,
}

pub fn random_instance(rng: &mut impl Rng) -> Instance {
    let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    let channels = rng.gen_range(1..=3);
    let dim = rng.gen_range(1..=5);
    let window = if rng.gen_bool(0.3) { 3 } else { 1 };
    let hidden: Vec<usize> = if rng.gen_bool(0.5) { vec![rng.gen_range(1..=4)] } else { vec![] };
    let (n_seen, n_unseen) = (rng.gen_range(1..=3), rng.gen_range(1..=2));
    let space = LabelSpace::dense(n_seen, n_unseen, false).unwrap();

    let gauss = |rng: &mut dyn rand::RngCore| -> f64 { StandardNormal.sample(rng) };
    let data = (0..h * w * channels).map(|_| gauss(rng)).collect();
    let image = Image::new(channels, h, w, data).unwrap();
    let mut params = BackboneParams::init(channels, window, &hidden, dim, rng).unwrap();
    for layer in params.layers_mut() {
        layer.bias.iter_mut().for_each(|b| *b = 0.5 * gauss(rng));
    }
    let rows = space
        .all()
        .iter()
        .map(|&id| (id, (0..dim).map(|_| gauss(rng)).collect()))
        .collect();
    let table = EmbeddingTable::new(dim, rows).unwrap();

    let mut y = LabelMask::zeros(h, w);
    let mut ybar = LabelMask::zeros(h, w);
    for n in 0..h {
        for m in 0..w {
            match rng.gen_range(0..3) {
                0 => y.set(n, m, space.seen()[rng.gen_range(0..n_seen)]),
                1 => ybar.set(n, m, space.unseen()[rng.gen_range(0..n_unseen)]),
                _ => {}
            }
        }
    }
    // half the instances use the fine-tuning objective over every class
    let seen_ids = if rng.gen_bool(0.5) { space.all().to_vec() } else { space.seen().to_vec() };
    let objective = Objective::new(seen_ids, space.all().to_vec(), rng.gen_range(0.0..2.0)).unwrap();
    Instance {
        image,
        params,
        table,
        objective,
        y,
        ybar,
        space,
    }
}

/// Loss through the unfused path: backbone, softmax, masked cross-entropy.
pub fn reference_loss(inst: &Instance, params: &BackboneParams) -> f64 {
    let feat = forward_backbone(&inst.image, params).unwrap();
    let p_seen = project_probs(&feat, &inst.table, &inst.objective.seen_ids).unwrap();
    let p_pseudo = project_probs(&feat, &inst.table, &inst.objective.pseudo_ids).unwrap();
    combined_loss(&p_seen, &inst.y, &p_pseudo, &inst.ybar, inst.objective.lambda).unwrap()
}

/// Relative error used by the gradient check. Entries below the floor are
/// compared on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between the analytic gradient and central
/// differences with step `h`, over every parameter.
pub fn max_gradient_error(inst: &Instance, h: f64) -> f64 {
    let (_, grads) = backward(&inst.image, &inst.params, &inst.table, &inst.objective, &inst.y, &inst.ybar).unwrap();
    let mut worst = 0.0f64;
    for (l, g) in grads.layers.iter().enumerate() {
        let count = g.weights.len() + g.bias.len();
        for i in 0..count {
            let probe = |delta: f64| {
                let mut p = inst.params.clone();
                let layer = &mut p.layers_mut()[l];
                let wlen = layer.weights.len();
                if i < wlen {
                    layer.weights[i] += delta;
                } else {
                    layer.bias[i - wlen] += delta;
                }
                reference_loss(inst, &p)
            };
            let numeric = (probe(h) - probe(-h)) / (2.0 * h);
            let analytic = if i < g.weights.len() { g.weights[i] } else { g.bias[i - g.weights.len()] };
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    worst
}
