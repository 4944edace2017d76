//! Cross-module properties: augmentation, remeshing, tokenization and the
//! configuration file format.

use std::collections::BTreeSet;

use meshmae::augment::{augment, AugConfig};
use meshmae::config::{Preset, RunConfig};
use meshmae::dataset::tmesh_tokens;
use meshmae::mesh::manifold_report;
use meshmae::patchify::{FaceOrder, FACES_PER_PATCH, VERTICES_PER_PATCH};
use meshmae::remesh::{remesh_pipeline, RemeshConfig};
use meshmae::synth::{generate, ShapeFamily};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn family() -> impl Strategy<Value = ShapeFamily> {
    prop_oneof![
        Just(ShapeFamily::Sphere),
        Just(ShapeFamily::Box),
        Just(ShapeFamily::Cylinder),
        Just(ShapeFamily::Torus),
        Just(ShapeFamily::SegHemisphere),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn augmented_meshes_remesh_into_valid_tmeshes(
        fam in family(),
        seed in 0u64..1000,
        sigma in 0.0f64..0.3,
        mag in 0.0f64..0.1,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = generate(fam, 0.05, 0.25, &mut rng).mesh;
        let aug = augment(&raw, &AugConfig { enable: true, scale_sigma: sigma, ffd_magnitude: mag }, &mut rng);
        prop_assert_eq!(aug.num_faces(), raw.num_faces());

        let t = remesh_pipeline(&aug, &RemeshConfig { seed, ..RemeshConfig::default() }).unwrap();
        prop_assert!((96..=256).contains(&t.num_patches));
        prop_assert_eq!(t.mesh.num_faces(), t.num_patches * FACES_PER_PATCH);
        prop_assert!(manifold_report(&t.mesh).is_watertight);
        let mut verts = vec![BTreeSet::new(); t.num_patches];
        for (f, face) in t.mesh.faces.iter().enumerate() {
            verts[t.patch_id[f]].extend(face.iter().copied());
        }
        prop_assert!(verts.iter().all(|v| v.len() == VERTICES_PER_PATCH));

        for order in FaceOrder::ALL {
            let tokens = tmesh_tokens(&t, order, seed).unwrap();
            prop_assert_eq!(tokens.count, t.num_patches);
            prop_assert!(tokens.features.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn config_text_round_trips(seed in 0..=i64::MAX as u64, ratio in 0.05f64..0.95, lambda in 0.0f64..2.0, variants in 1usize..=100) {
        let mut cfg = RunConfig::desk();
        cfg.seed = seed;
        cfg.variants = variants;
        cfg.pretrain.mask_ratio = ratio;
        cfg.pretrain.lambda = lambda;
        let back = RunConfig::from_toml(&cfg.to_toml(), Preset::Paper).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn seeds_beyond_toml_integers_are_rejected() {
    let cfg = RunConfig { seed: i64::MAX as u64 + 1, ..RunConfig::desk() };
    assert!(cfg.validate().is_err());
}

#[test]
fn face_orders_permute_faces_within_patches() {
    let raw = generate(ShapeFamily::Box, 0.0, 0.0, &mut ChaCha8Rng::seed_from_u64(4)).mesh;
    let t = remesh_pipeline(&raw, &RemeshConfig::default()).unwrap();
    let base = tmesh_tokens(&t, FaceOrder::Original, 0).unwrap();
    let width = FACES_PER_PATCH * 10;
    // area and face normal do not depend on which corner comes first
    let invariant_rows = |x: &[f64]| {
        let mut rows: Vec<[i64; 4]> = x.chunks(10).map(|r| [r[0], r[4], r[5], r[6]].map(|v| (v * 1e8).round() as i64)).collect();
        rows.sort();
        rows
    };
    for order in [FaceOrder::RotateL, FaceOrder::RotateR, FaceOrder::Random] {
        let other = tmesh_tokens(&t, order, 9).unwrap();
        assert_eq!(other.centers, base.centers);
        for k in 0..base.count {
            let (a, b) = (&base.features[k * width..(k + 1) * width], &other.features[k * width..(k + 1) * width]);
            assert_eq!(invariant_rows(a), invariant_rows(b), "{} patch {k}", order.name());
        }
    }
}
