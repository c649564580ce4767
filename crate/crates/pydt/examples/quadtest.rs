use pydt::data::DataSet;
use pydt::em::*;
use pydt::hyper::Hyperparams;
use pydt::optim::LbfgsOptions;
use pydt::tree::{Attachment, NodeId, Tree};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn four_clusters(seed: u64, n: usize) -> (DataSet, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = (1.0f64 / 8.0).sqrt();
    let (mut rows, mut labels) = (Vec::new(), Vec::new());
    for i in 0..n {
        let cluster = i % 4;
        let cx = if cluster % 2 == 0 { -1.0 } else { 1.0 };
        let cy = if cluster / 2 == 0 { -1.0 } else { 1.0 };
        labels.push(cluster);
        rows.push(vec![cx + sd * rng.sample::<f64, _>(StandardNormal), cy + sd * rng.sample::<f64, _>(StandardNormal)]);
    }
    (DataSet::from_rows(&rows).unwrap(), labels)
}

fn main() {
    let (data, labels) = four_clusters(1, 100);
    let hyper = Hyperparams::default();
    let em = EmOptions { max_cycles: 6, lbfgs: LbfgsOptions { max_iters: 40, ..Default::default() }, ..Default::default() };

    // binary-mode search to get a well-fit binary tree
    let ddt_cfg = SearchConfig { fixed_branching: true, max_moves: 150, stall_moves: 50, seed: 1, em: em.clone(), ..Default::default() };
    let ddt = greedy_search(FitData::Gaussian(&data), &hyper, &ddt_cfg).unwrap();
    let binary = ddt.entries[0].tree.clone();
    println!("binary bound (ddt mode): {:.2}", ddt.entries[0].bound);

    // identify the four "cluster root" subtrees: smallest subtrees covering >= 20 leaves with >= 90% purity
    let mut cluster_roots: Vec<NodeId> = Vec::new();
    for label in 0..4usize {
        let mut best: Option<(usize, NodeId)> = None;
        for id in binary.preorder() {
            let node = binary.node(id);
            if node.is_root() { continue; }
            let leaves: Vec<usize> = binary.preorder_from(id).iter().filter_map(|&x| binary.node(x).leaf_index).collect();
            if leaves.len() < 20 { continue; }
            let pure = leaves.iter().filter(|&&l| labels[l] == label).count();
            if pure as f64 >= 0.9 * leaves.len() as f64 {
                if best.map_or(true, |(sz, _)| leaves.len() < sz) {
                    best = Some((leaves.len(), id));
                }
            }
        }
        match best {
            Some((_, id)) => cluster_roots.push(id),
            None => {}
        }
    }
    println!("found {} candidate cluster roots", cluster_roots.len());
    if cluster_roots.len() < 4 { return; }

    // build the quad variant: detach three cluster roots and attach them at the
    // node where the remaining one hangs
    let mut quad = binary.clone();
    let keep = cluster_roots[0];
    for &r in &cluster_roots[1..4] {
        quad.detach_subtree(r).unwrap();
    }
    let hub = quad.node(keep).parent.unwrap();
    let hub = if quad.node(hub).is_root() {
        // keep needs a parent branch point: insert one
        let t = quad.node(keep).time * 0.5;
        let at = Attachment::OnEdge { child: keep, time: t };
        let r = cluster_roots[1];
        quad.attach_subtree(r, &at).unwrap();
        quad.node(keep).parent.unwrap()
    } else { hub };
    for &r in &cluster_roots[1..4] {
        if quad.node(r).parent.is_none() {
            let t_hub = quad.node(hub).time;
            if quad.node(r).time <= t_hub { println!("time clash"); return; }
            quad.attach_subtree(r, &Attachment::AtNode { node: hub }).unwrap();
        }
    }
    // prune now-dangling internal chain: detached parents were spliced automatically
    println!("quad validate: {:?}", quad.validate());
    println!("hub degree: {}", quad.node(hub).degree());

    // fit both in PYDT mode with equal budgets
    let q0 = QHyper::from_priors(&hyper, false);
    let mut b1 = binary.clone();
    let fit_b = run_em(&mut b1, FitData::Gaussian(&data), &q0, &hyper.priors, &em).unwrap();
    let mut q1 = quad.clone();
    let fit_q = run_em(&mut q1, FitData::Gaussian(&data), &q0, &hyper.priors, &em).unwrap();
    println!("PYDT-mode bounds: binary {:.2} (alpha {:.3}) vs quad {:.2} (alpha {:.3})",
        fit_b.bound, fit_b.q.alpha, fit_q.bound, fit_q.q.alpha);
}
