use voxtrack_web::{occlusion_probe, soft_argmax_probe, SceneRunner};

#[test]
fn probe_recovers_the_blob_centre() {
    let v = soft_argmax_probe(700.0, 760.0, 731.0, 62.5, 4.0).unwrap();
    assert!(v["error_mm"].as_f64().unwrap() < 5.0);
    let slice = v["slice"].as_array().unwrap();
    assert_eq!(slice.len(), 16);
    assert_eq!(slice[0].as_array().unwrap().len(), 16);
}

#[test]
fn probe_rejects_bad_input() {
    assert!(soft_argmax_probe(-1.0, 700.0, 700.0, 62.5, 4.0).is_err());
    assert!(soft_argmax_probe(700.0, 700.0, 700.0, 0.0, 4.0).is_err());
    assert!(soft_argmax_probe(700.0, 700.0, 700.0, 62.5, 0.0).is_err());
}

#[test]
fn occluder_in_line_with_a_camera_blocks_that_view() {
    let v = occlusion_probe([5000.0, 5000.0], [5000.0, 5000.0], 0.7).unwrap();
    let fractions: Vec<f64> = serde_json::from_value(v["fractions"].clone()).unwrap();
    assert_eq!(fractions.len(), 5);

    // occluder 1 m in front of the target, on the line to camera 0
    let cams: Vec<[f64; 2]> = serde_json::from_value(v["cameras"].clone()).unwrap();
    let target = [5000.0, 5000.0];
    let (dx, dy) = (cams[0][0] - target[0], cams[0][1] - target[1]);
    let n = (dx * dx + dy * dy).sqrt();
    let occluder = [target[0] + 1000.0 * dx / n, target[1] + 1000.0 * dy / n];
    let v = occlusion_probe(occluder, target, 0.7).unwrap();
    let fractions: Vec<f64> = serde_json::from_value(v["fractions"].clone()).unwrap();
    let hard: Vec<f64> = serde_json::from_value(v["hard"].clone()).unwrap();
    let off: Vec<f64> = serde_json::from_value(v["off"].clone()).unwrap();
    assert!(fractions[0] > 0.7, "{fractions:?}");
    assert_eq!(hard[0], 0.0);
    assert!(off.iter().all(|&w| (w - 0.2).abs() < 1e-12));
    assert!(occlusion_probe(occluder, target, 1.5).is_err());
}

#[test]
fn scene_runner_tracks_every_frame() {
    let mut r = SceneRunner::new(1, 2, 3).unwrap();
    assert_eq!(r.cameras()["cameras"].as_array().unwrap().len(), 5);
    let mut frames = 0;
    while !r.done() {
        let v = r.step().unwrap();
        assert_eq!(v["persons"].as_array().unwrap().len(), 2);
        assert_eq!(v["tracks"].as_array().unwrap().len(), 2);
        frames += 1;
    }
    assert_eq!(frames, 3);
    assert!(r.step().is_err());
    assert!(SceneRunner::new(1, 2, 0).unwrap().done());
}
