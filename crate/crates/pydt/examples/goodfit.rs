use pydt::bp::LeafMessages;
use pydt::data::DataSet;
use pydt::em::*;
use pydt::hyper::Hyperparams;
use pydt::tree::{Attachment, Tree};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sd = (1.0f64 / 8.0).sqrt();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..100 {
        let cluster = i % 4;
        let cx = if cluster % 2 == 0 { -1.0 } else { 1.0 };
        let cy = if cluster / 2 == 0 { -1.0 } else { 1.0 };
        labels.push(cluster);
        rows.push(vec![cx + sd * rng.sample::<f64, _>(StandardNormal), cy + sd * rng.sample::<f64, _>(StandardNormal)]);
    }
    let data = DataSet::from_rows(&rows).unwrap();
    let hyper = Hyperparams::default();
    let q0 = QHyper::from_priors(&hyper, false);

    // hand-built: quadfurcation at 0.45, caterpillar per cluster
    let mut tree = Tree::new(2);
    let l0 = tree.new_leaf(0);
    tree.attach_subtree(l0, &Attachment::FirstChild).unwrap();
    let l1 = tree.new_leaf(1);
    tree.attach_subtree(l1, &Attachment::OnEdge { child: l0, time: 0.45 }).unwrap();
    let hub = tree.node(l1).parent.unwrap();
    let l2 = tree.new_leaf(2);
    tree.attach_subtree(l2, &Attachment::AtNode { node: hub }).unwrap();
    let l3 = tree.new_leaf(3);
    tree.attach_subtree(l3, &Attachment::AtNode { node: hub }).unwrap();
    // cluster roots are leaves 0..3; attach remaining points into their cluster's subtree
    let mut cluster_edge = [l0, l1, l2, l3];
    for i in 4..100 {
        let c = labels[i];
        let t_att = 0.5 + 0.4 * ((i - 4) as f64 / 96.0);
        let leaf = tree.new_leaf(i);
        let target = cluster_edge[c];
        let tp = tree.node(tree.node(target).parent.unwrap()).time;
        let at = Attachment::OnEdge { child: target, time: t_att.max(tp + 1e-3).min(0.98) };
        tree.attach_subtree(leaf, &at).unwrap();
        cluster_edge[c] = leaf;
    }
    assert!(tree.validate().is_empty(), "{:?}", tree.validate());

    let leaves = LeafMessages::point_mass(&data);
    let mut q = q0.clone();
    for cycle in 0..6 {
        let stats = e_step(&tree, &leaves, &q).unwrap();
        m_step_times(&mut tree, &stats, &q, &Default::default()).unwrap();
        let stats = e_step(&tree, &leaves, &q).unwrap();
        q = update_hyper(&tree, &stats, &q, &hyper.priors).unwrap();
        let bound = elbo(&tree, &leaves, &q, &hyper.priors).unwrap();
        if true {
            println!("cycle {cycle}: tau {:.3e} sigma2 {:.3e} c {:.3} alpha {:.3} elbo {:.2} sbound {:.2}",
                q.precision.mean(), q.sigma2_eff(), q.c.mean(), q.alpha, bound,
                search_bound(&tree, &leaves, &q).unwrap());
        }
    }
    // time histogram
    let mut near_ceil = 0;
    for id in tree.internal_nodes() {
        if tree.node(id).time > 0.99 { near_ceil += 1; }
    }
    println!("internal nodes near ceiling: {near_ceil}/{}", tree.internal_nodes().len());
}
// (appended) quick bound comparison with the short-cycle regime
