use serde_json::Value;
use testbed_web::{detect_onset, fsr_heatmap, grasps, simulate_pull};

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn grasp_lists_match_the_catalog() {
    let v = parse(grasps("drawer", "handle"));
    assert!(v.as_array().unwrap().iter().any(|g| g == "handle-top"));
    assert!(parse(grasps("window", "handle"))["error"].is_string());
}

#[test]
fn light_pull_opens_the_drawer() {
    let v = parse(simulate_pull("drawer", "handle", "handle-top", 0.0, false, 1));
    assert_eq!(v["label"], "Success", "{v}");
    assert!(v["peak_opening"].as_f64().unwrap() >= 200.0);
    let fsr = v["fsr"].as_array().unwrap();
    assert!(!fsr.is_empty() && fsr.len() <= 400);
    assert_eq!(v["channel"], 9);
}

#[test]
fn out_of_range_resistance_is_an_error() {
    let v = parse(simulate_pull("door", "knob", "knob-palm-horizontal", 11.0, false, 1));
    assert!(v["error"].as_str().unwrap().contains("10"), "{v}");
}

#[test]
fn heatmap_peaks_at_the_pressed_channel() {
    // Channel 9: back column, fourth row up, z = +12.5 mm.
    let v = parse(fsr_heatmap("handle", 180.0, 12.5, 10.0));
    let counts: Vec<u64> = v["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).collect();
    let best = (0..counts.len()).max_by_key(|&i| counts[i]).unwrap();
    assert_eq!(best, 9);
    assert_eq!(counts[9], 3863);
    assert!(parse(fsr_heatmap("knob", 0.0, 0.0, -1.0))["error"].is_string());
}

#[test]
fn onset_of_a_step_trace() {
    let times: Vec<f64> = (0..600).map(|i| f64::from(i) * 0.01).collect();
    let values: Vec<f64> = times.iter().map(|&t| if (2.0..4.0).contains(&t) { 500.0 } else { 0.0 }).collect();
    let v = parse(detect_onset(times, values, 0.2, 100.0));
    assert!((v["onset"].as_f64().unwrap() - 1.992).abs() < 0.01, "{v}");
    assert!((v["release"].as_f64().unwrap() - 3.998).abs() < 0.01, "{v}");
    assert_eq!(v["normalized"].as_array().unwrap().len(), 100);
    assert!(parse(detect_onset(vec![0.0], vec![], 0.2, 100.0))["error"].is_string());
}
