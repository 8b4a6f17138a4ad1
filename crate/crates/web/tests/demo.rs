use cbc_web::demo::{complexity_table, deepfool_path, AttackLab, Plane};

#[test]
fn lab_trains_and_attacks_reduce_confidence() {
    let lab = AttackLab::train(1).unwrap();
    assert!(lab.clean_accuracy > 0.9, "{}", lab.clean_accuracy);
    let v = lab.attack(0, "fgsm", 0.0, 1).unwrap();
    assert_eq!(v.original, v.adversarial);
    let v = lab.attack(3, "bim", 0.05, 10).unwrap();
    assert!(v.linf <= 0.05 + 1e-6, "budget is total: {}", v.linf);
    assert_eq!(v.original.len(), 144);
    assert!((v.adversarial_probabilities.iter().sum::<f32>() - 1.0).abs() < 1e-4);
    let drop = v.clean_probabilities[v.label] - v.adversarial_probabilities[v.label];
    assert!(drop >= 0.0, "attack raised the true-class probability");
    assert!(lab.attack(0, "nope", 0.1, 1).is_err());
    assert!(lab.attack(10_000, "fgsm", 0.1, 1).is_err());
}

#[test]
fn deepfool_path_crosses_a_boundary() {
    let p = deepfool_path([0.8, 0.3], 0.02, 7).unwrap();
    assert!(p.path.len() >= 2);
    assert_ne!(p.start_class, p.end_class);
    assert_eq!(p.start_class, Plane::seeded(7).class_of([0.8, 0.3]));
}

#[test]
fn complexity_table_tracks_removed_layers() {
    let full = complexity_table("fmnist", 2).unwrap();
    assert_eq!(full[2].macs, 5_841_936);
    let fewer = complexity_table("fmnist", 4).unwrap();
    assert!(fewer[2].macs < full[2].macs);
    assert!(complexity_table("fmnist", 9).is_err());
    assert!(complexity_table("mnist", 1).is_err());
}
