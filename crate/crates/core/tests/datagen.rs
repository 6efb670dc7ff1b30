use arnn::datagen::{generate, DatasetSpec, GlyphSet, Task, Variant, COLORS};

fn label_shares(task: Task, n: usize) -> Vec<f64> {
    let spec = DatasetSpec {
        task,
        image_size: 40,
        train: n,
        val: 0,
        test: 0,
        digits_min: 3,
        digits_max: 3,
        seed: 21,
        ..Default::default()
    };
    let data = generate(&spec, &GlyphSet::builtin()).unwrap();
    let mut counts = vec![0usize; task.classes()];
    for s in &data.train {
        counts[s.label] += 1;
    }
    counts.iter().map(|&c| c as f64 / n as f64).collect()
}

#[test]
fn color_labels_sit_at_one_in_five() {
    // Chance on the color task is 20%.
    for (k, share) in label_shares(Task::ColorOfDigit, 10_000).into_iter().enumerate() {
        assert!((share - 0.2).abs() <= 0.01, "color {k}: {share}");
    }
}

#[test]
fn digit_labels_sit_at_one_in_ten() {
    for (k, share) in label_shares(Task::DigitOfColor, 10_000).into_iter().enumerate() {
        assert!((share - 0.1).abs() <= 0.01, "digit {k}: {share}");
    }
}

#[test]
fn roi_pixels_carry_the_label_color() {
    let spec = DatasetSpec { image_size: 48, train: 50, val: 0, test: 0, seed: 4, ..Default::default() };
    let spec = DatasetSpec { digits_min: 3, digits_max: 3, variant: Variant::Ref, ..spec };
    let data = generate(&spec, &GlyphSet::builtin()).unwrap();
    let plane = 48 * 48;
    for s in &data.train {
        let rgb = COLORS[s.label];
        for k in (0..plane).filter(|&k| s.roi.data()[k] == 1.0) {
            for c in 0..3 {
                assert_eq!(s.image.data()[c * plane + k], rgb[c] as f32 as f64, "sample {} pixel {k}", s.index);
            }
        }
    }
}

#[test]
fn splits_do_not_repeat_images() {
    let spec = DatasetSpec { image_size: 40, train: 30, val: 30, test: 30, digits_min: 3, digits_max: 3, ..Default::default() };
    let data = generate(&spec, &GlyphSet::builtin()).unwrap();
    let all: Vec<_> = data.train.iter().chain(&data.val).chain(&data.test).collect();
    for (a, x) in all.iter().enumerate() {
        for y in &all[a + 1..] {
            assert_ne!(x.image, y.image);
        }
    }
}
