//! End-to-end behaviour of the pair builder and the stylization pipelines on
//! a tiny untrained model.

use portraitgan::encoder::{Encoder, EncoderTarget};
use portraitgan::faces::{write_dataset, FaceStyle};
use portraitgan::generator::{map_latent, sample_z, synthesize};
use portraitgan::inversion::{embed_reference, sefa_basis, InvertConfig, ReferenceCache};
use portraitgan::losses::{FeatureNetConfig, LossNets};
use portraitgan::pseudo_pairs::{
    build_pair_dataset, optimize_level2, regenerates, verify_dataset, PairConfig, PairLevel, PairModels, PairedDataset,
};
use portraitgan::stylize::{
    content_code, multimodal_code, reference_code, stylize_general, stylize_multimodal, stylize_reference, MixSpec,
    StylePolicy,
};
use portraitgan::{Error, Generator, GeneratorConfig, GeneratorRole, Image, LatentSpace};

fn tiny() -> GeneratorConfig {
    GeneratorConfig {
        resolution: 16,
        latent_dim: 32,
        channel_base: 64,
        channel_max: 8,
        mapping_layers: 2,
    }
}

fn nets() -> LossNets {
    LossNets::random(FeatureNetConfig {
        loss_resolution: 32,
        seed: 2,
    })
    .unwrap()
}

fn models() -> (Generator, Generator, Encoder, Encoder) {
    let g = Generator::with_w_mean_samples(tiny(), 1, 300).unwrap();
    let mut g_star = Generator::with_w_mean_samples(tiny(), 2, 300).unwrap();
    g_star.set_role(GeneratorRole::UnconstrainedFinetuned);
    let e_z = Encoder::new(EncoderTarget::ZPlus, &g, 3).unwrap();
    let e_wp = Encoder::new(EncoderTarget::WPlus, &g, 4).unwrap();
    (g, g_star, e_z, e_wp)
}

#[test]
fn pair_dataset_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let style_dir = dir.path().join("cartoon");
    write_dataset(&style_dir, 3, 7, FaceStyle::Cartoon, 16).unwrap();
    std::fs::write(style_dir.join("broken.png"), b"not a png").unwrap();
    let (g, g_star, e_z, e_wp) = models();
    let nets = nets();
    let pm = PairModels {
        g: &g,
        g_star: &g_star,
        e_zplus: &e_z,
        e_wplus: &e_wp,
        nets: &nets,
    };
    let cfg = PairConfig {
        iterations: 15,
        ..PairConfig::default()
    };
    let pairs = dir.path().join("pairs");
    let mut runs = Vec::new();
    let ds = build_pair_dataset(&style_dir, &pairs, "cartoon", pm, &cfg, &mut |id: &str, n| runs.push((id.to_string(), n))).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.manifest.skipped.len(), 1);
    assert!(runs.iter().all(|(_, n)| *n == 15));

    for s in &ds.samples {
        assert!(s.meta.level2_final_loss <= s.meta.level2_initial_loss);
        assert_eq!(regenerates(s, &g).unwrap(), [true; 3]);
        // Level 1: w1 = map(z1), p1 = synthesize(w1); level 2 decodes under G.
        assert!(map_latent(&s.z1, &g).unwrap().bit_eq(&s.w1));
        assert!(map_latent(&s.z2, &g).unwrap().bit_eq(&s.w2));
        assert_eq!(synthesize(&s.w3, &g).unwrap().to_rgb8(), s.p3.to_rgb8());
        assert!(e_z.encode(&s.style_image).unwrap().bit_eq(&s.z1));
        assert!(e_wp.encode(&s.style_image).unwrap().bit_eq(&s.w3));
    }

    // Reloading verifies hashes; a rerun resumes without optimizing.
    let loaded = PairedDataset::load(&pairs).unwrap();
    assert_eq!(loaded.codes(PairLevel::Two).unwrap().dims(), &[3, g.layer_count(), 32]);
    runs.clear();
    build_pair_dataset(&style_dir, &pairs, "cartoon", pm, &cfg, &mut |id: &str, n| runs.push((id.to_string(), n))).unwrap();
    assert!(runs.iter().all(|(_, n)| *n == 0));

    assert!(verify_dataset(&pairs).unwrap());
    let victim = pairs.join(&ds.samples[1].meta.id).join("w2.f32");
    let mut bytes = std::fs::read(&victim).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&victim, bytes).unwrap();
    assert!(!verify_dataset(&pairs).unwrap());
    assert!(PairedDataset::load(&pairs).is_err());
}

#[test]
fn pair_builder_checks_roles() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 1, 1, FaceStyle::Cartoon, 16).unwrap();
    let (g, _, e_z, e_wp) = models();
    let nets = nets();
    let not_star = g.clone();
    let pm = PairModels {
        g: &g,
        g_star: &not_star,
        e_zplus: &e_z,
        e_wplus: &e_wp,
        nets: &nets,
    };
    let err = build_pair_dataset(dir.path(), dir.path().join("pairs"), "x", pm, &PairConfig::default(), &mut |_: &str, _| {});
    assert!(matches!(err, Err(Error::Config(_))));
    assert!(!dir.path().join("pairs").join("face_00000").exists());
}

#[test]
fn level2_fixed_point() {
    let (g, g_star, _, _) = models();
    let nets = nets();
    let z0 = sample_z(1, 5, LatentSpace::ZPlus, g.config()).unwrap().remove(0);
    let s = synthesize(&map_latent(&z0, &g_star).unwrap(), &g_star).unwrap();
    let l2 = optimize_level2(&z0, &s, &g_star, &g, &nets, 100, 0.02, 0.1, |_, _| {}).unwrap();
    assert!(l2.curve[0] < 1e-3, "{}", l2.curve[0]);
    let drift = z0
        .to_vec()
        .iter()
        .zip(l2.z2.to_vec())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(drift < 0.05, "{drift}");
}

#[test]
fn mixing_pipelines_agree_at_full_depth() {
    let (g, _, _, _) = models();
    let nets = nets();
    let e_w = Encoder::new(EncoderTarget::W, &g, 8).unwrap();
    let portrait = Image::from_rgb8(16, 16, &vec![128u8; 16 * 16 * 3]).unwrap();
    let policy = StylePolicy::for_style("cartoon", "g".into(), g.layer_count(), PairLevel::Two);
    let general = stylize_general(&portrait, &policy, &e_w, &g).unwrap();
    let l = g.layer_count();

    let multi = stylize_multimodal(&portrait, &e_w, &g, &[MixSpec::noise(l, policy.truncation_psi, 3)]).unwrap();
    assert!(multi[0].bit_eq(&general));

    let dir = tempfile::tempdir().unwrap();
    let cache = ReferenceCache::new(dir.path());
    let basis = sefa_basis(&g, 8).unwrap();
    let cfg = InvertConfig {
        iterations: 5,
        basis_size: 8,
        ..InvertConfig::default()
    };
    let reference = write_dataset(dir.path().join("refs"), 1, 4, FaceStyle::Cartoon, 16).unwrap();
    let reference = Image::load_png(&reference[0]).unwrap();
    let (emb, steps) = embed_reference(&reference, "cartoon", &g, &basis, &nets, &cfg, &cache, |_, _| {}).unwrap();
    assert_eq!(steps, 5);
    let (again, steps) = embed_reference(&reference, "cartoon", &g, &basis, &nets, &cfg, &cache, |_, _| {}).unwrap();
    assert_eq!(steps, 0);
    assert!(again.w_code.bit_eq(&emb.w_code));

    let guided = stylize_reference(&portrait, &policy, policy.truncation_psi, &e_w, &g, &emb, l).unwrap();
    assert!(guided.bit_eq(&general));

    // Row provenance of the codes entering synthesis.
    let content = content_code(&portrait, policy.truncation_psi, &e_w, &g).unwrap();
    for k in 0..=l {
        let noise = multimodal_code(&content, &MixSpec::noise(k, 0.7, 9), &g).unwrap();
        let refd = reference_code(&content, &emb, k, &g).unwrap();
        for i in 0..l {
            let want_ref = if i < k { content.row(i).unwrap() } else { emb.w_code.row(0).unwrap() };
            assert_eq!(refd.row(i).unwrap(), want_ref);
            if i < k {
                assert_eq!(noise.row(i).unwrap(), content.row(i).unwrap());
            }
        }
    }

    let anime = StylePolicy::for_style("anime", "g".into(), l, PairLevel::Two);
    assert!(matches!(
        stylize_reference(&portrait, &anime, 0.6, &e_w, &g, &emb, 2),
        Err(Error::StyleMismatch { .. })
    ));
}
