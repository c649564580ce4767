use pydt::bp::LeafMessages;
use pydt::data::DataSet;
use pydt::em::*;
use pydt::hyper::Hyperparams;
use pydt::optim::LbfgsOptions;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sd = (1.0f64 / 8.0).sqrt();
    let mut rows = Vec::new();
    for i in 0..100 {
        let cluster = i % 4;
        let cx = if cluster % 2 == 0 { -1.0 } else { 1.0 };
        let cy = if cluster / 2 == 0 { -1.0 } else { 1.0 };
        rows.push(vec![cx + sd * rng.sample::<f64, _>(StandardNormal), cy + sd * rng.sample::<f64, _>(StandardNormal)]);
    }
    let data = DataSet::from_rows(&rows).unwrap();
    let hyper = Hyperparams::default();
    let q0 = QHyper::from_priors(&hyper, false);
    let mut tree = sequential_init(FitData::Gaussian(&data), &q0).unwrap();
    println!("init: min dt {:.3e}", pydt::test_support::min_edge_duration(&tree));
    let leaves = LeafMessages::point_mass(&data);
    let mut q = q0.clone();
    for cycle in 0..15 {
        let stats = e_step(&tree, &leaves, &q).unwrap();
        let max_bdt = stats.edge_b.iter().map(|(child, b)| {
            let p = tree.node(*child).parent.unwrap();
            b / (tree.node(*child).time - tree.node(p).time)
        }).fold(0.0f64, f64::max);
        let res = m_step_times(&mut tree, &stats, &q, &LbfgsOptions { max_iters: 40, ..Default::default() }).unwrap();
        let stats2 = e_step(&tree, &leaves, &q).unwrap();
        q = update_hyper(&tree, &stats2, &q, &hyper.priors).unwrap();
        let bound = elbo(&tree, &leaves, &q, &hyper.priors).unwrap();
        println!("cycle {cycle}: tau {:.4e} sigma2 {:.4e} c {:.3} alpha {:.4} mindt {:.3e} max_b/dt {:.3e} mstep {:.1}->{:.1} elbo {:.2}",
            q.precision.mean(), q.sigma2_eff(), q.c.mean(), q.alpha,
            pydt::test_support::min_edge_duration(&tree), max_bdt, res.before, res.after, bound);
    }
}
