use pydt::data::DataSet;
use pydt::em::{elbo, greedy_search, EmOptions, FitData, SearchConfig};
use pydt::hyper::Hyperparams;
use pydt::optim::LbfgsOptions;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use rand_distr::StandardNormal;

fn four_clusters(seed: u64, n: usize) -> (DataSet, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = (1.0f64 / 8.0).sqrt();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let cluster = i % 4; // interleaved: iid draws arrive in arbitrary order
        let cx = if cluster % 2 == 0 { -1.0 } else { 1.0 };
        let cy = if cluster / 2 == 0 { -1.0 } else { 1.0 };
        labels.push(cluster);
        rows.push(vec![
            cx + sd * rng.sample::<f64, _>(StandardNormal),
            cy + sd * rng.sample::<f64, _>(StandardNormal),
        ]);
    }
    (DataSet::from_rows(&rows).unwrap(), labels)
}

fn report(tag: &str, res: &pydt::em::SearchResult, labels: &[usize], priors: &pydt::hyper::HyperPriors) {
    let best = &res.entries[0];
    let full = elbo(&best.tree, &best.leaves, &best.q, priors).unwrap();
    println!("{tag}: bound {:.2} elbo {:.2} alpha {:.4} beta {:.4} c {:.3} s2 {:.4} moves {}",
        best.bound, full, best.q.alpha, best.q.beta, best.q.c.mean(), best.q.sigma2_eff(), res.moves_run);
    for id in best.tree.internal_nodes() {
        let node = best.tree.node(id);
        if node.degree() >= 3 && node.leaf_count >= 20 {
            let kid_info: Vec<(usize, usize, usize)> = node.children.iter().map(|&c| {
                let leaves: Vec<usize> = best.tree.preorder_from(c).iter()
                    .filter_map(|&x| best.tree.node(x).leaf_index).collect();
                let mut cnt = [0usize; 4];
                for &l in &leaves { cnt[labels[l]] += 1; }
                let (maj, &max) = cnt.iter().enumerate().max_by_key(|(_, &v)| v).unwrap();
                (leaves.len(), maj, max)
            }).collect();
            println!("   deg {} (n={}): children (size, majority-label, majority-count) {:?}", node.degree(), node.leaf_count, kid_info);
        }
    }
}

fn main() {
    let (data, labels) = four_clusters(1, 100);
    let hyper = Hyperparams::default();
    let config = SearchConfig {
        max_moves: 150,
        stall_moves: 50,
        seed: 1,
        em: EmOptions {
            max_cycles: 6,
            lbfgs: LbfgsOptions { max_iters: 40, ..Default::default() },
            ..Default::default()
        },
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let res = greedy_search(FitData::Gaussian(&data), &hyper, &config).unwrap();
    println!("pydt: {:?}", t0.elapsed());
    report("pydt", &res, &labels, &hyper.priors);
    let t1 = std::time::Instant::now();
    let ddt_cfg = SearchConfig { fixed_branching: true, ..config.clone() };
    let res_ddt = greedy_search(FitData::Gaussian(&data), &hyper, &ddt_cfg).unwrap();
    println!("ddt: {:?}", t1.elapsed());
    report("ddt", &res_ddt, &labels, &hyper.priors);
}
