use std::collections::HashMap;

use ctxdiff::data::{
    annotate, annotate_graph, gen_scene, make_context_batch, make_training_batch, read_ppm, render_scene, write_ppm,
    Direction, Geometry, MapKind, SceneSpec, ShapeSpec, TaskKind,
};
use ctxdiff::tensor::grad_check_many;
use ctxdiff::{Rng, Tensor};

#[test]
fn scenes_are_deterministic_and_well_formed() {
    for seed in 0..50u64 {
        let spec = SceneSpec::random(seed);
        assert!((2..=5).contains(&spec.shapes.len()));
        assert!(spec.shapes.iter().all(|s| s.geometry.inside_canvas()));
        let mut ranks: Vec<usize> = spec.shapes.iter().map(|s| s.depth_rank).collect();
        ranks.sort_unstable();
        ranks.dedup();
        assert_eq!(ranks.len(), spec.shapes.len());
    }
    let a = gen_scene(3, 32).unwrap();
    let b = gen_scene(3, 32).unwrap();
    for (x, y) in [(&a.image, &b.image), (&a.edge, &b.edge), (&a.seg, &b.seg), (&a.depth, &b.depth)] {
        assert!(x.bit_eq(y));
        assert_eq!(x.shape(), &[3, 32, 32]);
        assert!(x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    assert!(gen_scene(3, 4).is_err());
}

#[test]
fn background_only_scene_has_no_edges() {
    let spec = SceneSpec::random(11).background_only();
    let s = render_scene(&spec, 32).unwrap();
    assert!(s.edge.data().iter().all(|&v| v == 0.0));
    assert!(s.labels.iter().all(Option::is_none));
    assert!(s.depth.data().iter().all(|&v| v == -1.0));
}

#[test]
fn edge_map_marks_shape_boundaries() {
    let s = gen_scene(5, 32).unwrap();
    let ones = s.edge.data().iter().filter(|&&v| v == 1.0).count();
    assert!(ones > 0);
    assert!(s.edge.data().iter().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn seg_area_matches_analytic_area() {
    let size = 64;
    for seed in 0..20u64 {
        let spec = SceneSpec::random(seed);
        for shape in &spec.shapes {
            let alone = SceneSpec { shapes: vec![shape.clone()], ..spec.clone() };
            let s = render_scene(&alone, size).unwrap();
            // Shape 0 is painted red on a -1 background, so channel 0 encodes coverage.
            let pixels: f64 = s.seg.data()[..size * size].iter().map(|v| (v + 1.0) / 2.0).sum();
            let analytic = shape.geometry.area() * (size * size) as f64;
            assert!((pixels / analytic - 1.0).abs() < 0.05, "seed {seed}: {pixels} vs {analytic}");
        }
    }
}

#[test]
fn occlusion_follows_depth_rank() {
    let circle = |rank| ShapeSpec {
        geometry: Geometry::Circle { cx: 0.5, cy: 0.5, r: 0.2 },
        color: [0.5; 3],
        depth_rank: rank,
    };
    let spec = SceneSpec {
        shapes: vec![circle(0), circle(1)],
        bg_from: [0.0; 3],
        bg_to: [0.0; 3],
        bg_dir: (1.0, 0.0),
    };
    assert_eq!(spec.top_shape(0.5, 0.5), Some(1));
}

fn single(img: Vec<f64>, h: usize, w: usize) -> Tensor<f64> {
    let mut data = Vec::new();
    for _ in 0..3 {
        data.extend_from_slice(&img);
    }
    Tensor::from_vec(&[3, h, w], data).unwrap()
}

#[test]
fn edge_annotator_examples() {
    let flat = Tensor::full(&[3, 8, 8], 0.3);
    let e = annotate(&flat, MapKind::Edge).unwrap();
    assert!(e.data().iter().all(|&v| v == -1.0));

    // Step from -1 to 1 between columns 3 and 4: contrast 2.
    let img: Vec<f64> = (0..64).map(|i| if i % 8 < 4 { -1.0 } else { 1.0 }).collect();
    let e = annotate(&single(img, 8, 8), MapKind::Edge).unwrap();
    let row: Vec<f64> = e.data()[8 * 3..8 * 4].to_vec();
    let peak = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Sobel response 1*2 + 2*2 + 1*2 = 8 on both boundary columns.
    let mag: f64 = (64.0f64 + 1e-2).sqrt() - 1e-2f64.sqrt();
    let expect = 2.0 * (mag / 4.0).tanh() - 1.0;
    assert!((row[3] - expect).abs() < 1e-12 && (row[4] - expect).abs() < 1e-12);
    assert_eq!(peak, row[3]);
    assert_eq!(row[0], -1.0);
    assert_eq!(row[7], -1.0);
}

#[test]
fn seg_annotator_is_nearly_idempotent_on_posterized_maps() {
    let levels = [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0];
    let mut rng = Rng::new(8);
    let img: Vec<f64> = (0..3 * 8 * 8).map(|_| *rng.choose(&levels)).collect();
    let x = Tensor::from_vec(&[3, 8, 8], img).unwrap();
    let y = annotate(&x, MapKind::Seg).unwrap();
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    for (a, b) in x.data().iter().zip(y.data()) {
        // Independent band oracle: three sigmoid steps of height 2/3.
        let oracle = -1.0 + (2.0 / 3.0) * [-2.0 / 3.0, 0.0, 2.0 / 3.0].iter().map(|t| sig((a - t) / 0.1)).sum::<f64>();
        assert!((b - oracle).abs() < 1e-12);
        // Band edges sit 1/3, 1 and 5/3 away from the outermost levels.
        let softness = (2.0 / 3.0) * [1.0 / 3.0, 1.0, 5.0 / 3.0].iter().map(|d| sig(-d / 0.1)).sum::<f64>();
        assert!((a - b).abs() <= softness + 1e-12, "{a} -> {b}");
    }
}

#[test]
fn annotators_pass_grad_check() {
    let mut rng = Rng::new(9);
    for kind in [MapKind::Edge, MapKind::Seg, MapKind::Depth, MapKind::CannyLike, MapKind::ScribbleLike] {
        let x: Tensor<f64> = rng.normal_tensor(&[2, 3, 8, 8]).map(|v| 0.5 * v);
        let m: Tensor<f64> = rng.normal_tensor(&[2, 3, 8, 8]).map(|v| 0.5 * v);
        let r = grad_check_many(
            |g, v| {
                let y = annotate_graph(g, v[0], kind)?;
                let t = g.constant(m.clone());
                g.mse(y, t)
            },
            &[x],
            1e-3,
            None,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{kind}: {}", r.max_rel_error);
    }
}

#[test]
fn annotate_is_deterministic_and_batched_consistently() {
    let batch = make_context_batch::<f32>(TaskKind::new(MapKind::Depth, Direction::Image2Map), 3, 1, 16).unwrap();
    let again = annotate(&batch.query, MapKind::Depth).unwrap();
    assert!(again.bit_eq(&batch.target));
    for i in 0..3 {
        let item = batch.item(i).unwrap();
        assert!(annotate(&item.query, MapKind::Depth).unwrap().bit_eq(&item.target));
    }
}

#[test]
fn context_batch_image2map_targets_are_annotations() {
    let task = TaskKind::new(MapKind::Edge, Direction::Image2Map);
    let b = make_context_batch::<f32>(task, 4, 7, 32).unwrap();
    assert_eq!(b.len(), 4);
    assert_eq!(b.target.shape(), &[4, 3, 32, 32]);
    assert!(annotate(&b.query, MapKind::Edge).unwrap().bit_eq(&b.target));
    assert!(annotate(&b.example_src, MapKind::Edge).unwrap().bit_eq(&b.example_tgt));
    for (e, q) in b.example_seeds.iter().zip(&b.scene_seeds) {
        assert_ne!(e, q);
    }
    let pair = b.example_pair().unwrap();
    assert_eq!(pair.shape(), &[4, 6, 32, 32]);
    let per = 3 * 32 * 32;
    assert_eq!(&pair.data()[per..2 * per], &b.example_tgt.data()[..per]);
}

#[test]
fn direction_flip_swaps_roles() {
    for map in MapKind::TRAINING {
        let a = make_context_batch::<f64>(TaskKind::new(map, Direction::Image2Map), 3, 42, 16).unwrap();
        let b = make_context_batch::<f64>(TaskKind::new(map, Direction::Map2Image), 3, 42, 16).unwrap();
        assert!(a.query.bit_eq(&b.target));
        assert!(a.target.bit_eq(&b.query));
        assert!(a.example_src.bit_eq(&b.example_tgt));
        assert!(a.example_tgt.bit_eq(&b.example_src));
        assert_eq!(a.scene_seeds, b.scene_seeds);
    }
}

#[test]
fn held_out_kinds_are_generated_but_not_trained() {
    for map in MapKind::HELD_OUT {
        let task = TaskKind::new(map, Direction::Image2Map);
        let b = make_context_batch::<f32>(task, 2, 1, 16).unwrap();
        assert!(b.target.is_finite());
        assert!(make_training_batch::<f32>(task, 2, 1, 16).is_err());
        assert!(task.id().is_err());
    }
    for task in TaskKind::training() {
        assert!(make_training_batch::<f32>(task, 1, 1, 16).is_ok());
    }
}

#[test]
fn task_ids_and_names_round_trip() {
    let mut seen = HashMap::new();
    for (i, t) in TaskKind::training().into_iter().enumerate() {
        assert_eq!(t.id().unwrap(), i);
        assert_eq!(TaskKind::from_id(i).unwrap(), t);
        assert_eq!(t.to_string().parse::<TaskKind>().unwrap(), t);
        seen.insert(t, i);
    }
    assert_eq!(seen.len(), 6);
    assert!(TaskKind::from_id(6).is_err());
    assert_eq!("image2edge".parse::<TaskKind>().unwrap(), TaskKind::new(MapKind::Edge, Direction::Image2Map));
    assert_eq!("seg2image".parse::<TaskKind>().unwrap(), TaskKind::new(MapKind::Seg, Direction::Map2Image));
    assert!("image2sky".parse::<TaskKind>().is_err());
}

#[test]
fn ppm_round_trip_is_exact_on_byte_grid() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ppm");
    let img = gen_scene(2, 16).unwrap().image;
    write_ppm(&path, &img).unwrap();
    let back = read_ppm(&path).unwrap();
    assert!(back.max_abs_diff(&img) <= 1.0 / 255.0 + 1e-12);
    write_ppm(&dir.path().join("y.ppm"), &back).unwrap();
    assert!(read_ppm(&dir.path().join("y.ppm")).unwrap().bit_eq(&back));
}
