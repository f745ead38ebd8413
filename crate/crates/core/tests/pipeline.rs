//! A small end-to-end run: synthetic data, trunk training, functaset,
//! inference and the pose head.

use std::sync::OnceLock;

use tactfunc::functaset::{build_functaset, psnr_unit, reconstruct, Functa, Functaset};
use tactfunc::inference::{infer_point, knn_embed, knn_query, sgld_sample, SgldConfig};
use tactfunc::metatrain::{inner_fit, train_trunk, MetaConfig};
use tactfunc::pose::{pose_posterior, predict_pose, train_head, HeadConfig};
use tactfunc::siren::{Modulation, TrunkArch, TrunkParams};
use tactfunc::synthgen::{gen_dataset, SceneConfig, SyntheticDataset};

struct Small {
    data: SyntheticDataset,
    trunk: TrunkParams,
    fs: Functaset,
    cfg: MetaConfig,
}

fn arch() -> TrunkArch {
    TrunkArch { in_dim: 2, out_dim: 1, depth: 2, width: 32, latent_dim: 16, omega0: 30.0 }
}

fn small() -> &'static Small {
    static CELL: OnceLock<Small> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut scene = SceneConfig::bubble_like();
        scene.seed = 11;
        let data = gen_dataset(&scene, 60).unwrap();
        let cfg = MetaConfig { outer_steps: 150, outer_lr: 1e-3, seed: 2, ..Default::default() };
        let (trunk, log) = train_trunk(&data.train(), arch(), &cfg).unwrap();
        assert_eq!(log.len(), 150);
        let fs = build_functaset(&trunk, &data.images, cfg.inner_steps, cfg.inner_lr).unwrap();
        Small { data, trunk, fs, cfg }
    })
}

#[test]
fn training_is_reproducible_and_trends_down() {
    let s = small();
    let mut cfg = s.cfg.clone();
    cfg.outer_steps = 12;
    let (a, la) = train_trunk(&s.data.train(), arch(), &cfg).unwrap();
    let (b, lb) = train_trunk(&s.data.train(), arch(), &cfg).unwrap();
    assert_eq!(a.as_flat(), b.as_flat());
    assert_eq!(la.losses(), lb.losses());

    let cfg = MetaConfig { outer_steps: 150, ..s.cfg.clone() };
    let (_, log) = train_trunk(&s.data.train(), arch(), &cfg).unwrap();
    let median = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let l = log.losses();
    assert!(median(&l[l.len() - 15..]) < median(&l[..15]));
}

#[test]
fn inner_fit_leaves_trunk_untouched_and_improves() {
    let s = small();
    let before = s.trunk.checksum();
    let mut improved = 0;
    let test = s.data.test();
    for img in &test {
        let z0 = Modulation::zeros(16);
        let (_, l0) = inner_fit(&s.trunk, img, 0, s.cfg.inner_lr, &z0).unwrap();
        let (_, l3) = inner_fit(&s.trunk, img, 3, s.cfg.inner_lr, &z0).unwrap();
        if l3 < l0 {
            improved += 1;
        }
    }
    assert_eq!(s.trunk.checksum(), before);
    assert_eq!(improved, test.len());
}

#[test]
fn fitted_reconstruction_beats_zero_latent() {
    let s = small();
    for img in s.data.test() {
        let f = s.fs.get(img.sample_id).unwrap();
        let rec = reconstruct(&s.trunk, f, 64, 64).unwrap();
        let zero = Functa { z: vec![0.0; 16], ..f.clone() };
        let rec0 = reconstruct(&s.trunk, &zero, 64, 64).unwrap();
        assert!(psnr_unit(&rec, &img).unwrap() > psnr_unit(&rec0, &img).unwrap());
    }
}

#[test]
fn functaset_matches_point_inference() {
    let s = small();
    let img = &s.data.images[5];
    let (z, _) = infer_point(&s.trunk, img, 3, s.cfg.inner_lr, &Modulation::zeros(16)).unwrap();
    let stored = &s.fs.get(5).unwrap().z;
    let rounded: Vec<f32> = z.0.iter().map(|&v| v as f32).collect();
    assert_eq!(&rounded, stored);
    assert_eq!(s.fs.trunk_digest, tactfunc::siren::trunk_digest(&s.trunk));
}

#[test]
fn members_retrieve_themselves() {
    let s = small();
    for f in &s.fs.functas {
        let n = knn_query(&s.fs, f.latent().as_slice(), 1).unwrap();
        assert_eq!(n[0].sample_id, f.sample_id);
        assert_eq!(n[0].distance, 0.0);
        assert_eq!(n[0].weight, 1.0);
    }
}

#[test]
fn knn_warm_start_recovers_members() {
    let s = small();
    // With no refinement and k=1, a member whose one-step embedding lands
    // nearest its own functa gets that functa back.
    let mut hits = 0;
    for img in s.data.train().iter().take(20) {
        let e = knn_embed(&s.trunk, &s.fs, img, 1, 1, 0, s.cfg.inner_lr).unwrap();
        if e.neighbors[0].sample_id == img.sample_id {
            let stored = s.fs.get(img.sample_id).unwrap().latent();
            assert_eq!(e.z, stored);
            hits += 1;
        }
    }
    assert!(hits > 0);
    let img = &s.data.test()[0];
    let e = knn_embed(&s.trunk, &s.fs, img, 5, 1, 3, s.cfg.inner_lr).unwrap();
    assert_eq!(e.neighbors.len(), 5);
    assert!(e.z.is_finite() && e.loss.is_finite());
}

#[test]
fn pose_head_and_posterior_run() {
    let s = small();
    let (head, curve) = train_head(&s.fs, &HeadConfig { epochs: 5, hidden: vec![32, 32], ..Default::default() }).unwrap();
    assert_eq!(curve.len(), 5);
    let img = &s.data.test()[0];
    let post = sgld_sample(&s.trunk, img, &SgldConfig { chains: 10, ..Default::default() }, &Modulation::zeros(16)).unwrap();
    let pp = pose_posterior(&head, &post).unwrap();
    assert_eq!(pp.samples.len(), 10);
    for p in &pp.samples {
        assert!(p.theta > -std::f64::consts::PI && p.theta <= std::f64::consts::PI);
    }
    let point = predict_pose(&head, s.fs.get(img.sample_id).unwrap().latent().as_slice()).unwrap();
    assert!(point.x.is_finite());
}
