//! Runs every example so they stay in sync with the library.

macro_rules! example {
    ($name:ident, $file:literal) => {
        #[path = $file]
        mod $name;

        #[test]
        fn $name() {
            $name::run_example().unwrap();
        }
    };
}

example!(fused_kernels, "../examples/fused_kernels.rs");
example!(selective_forward, "../examples/selective_forward.rs");
example!(train_shapes, "../examples/train_shapes.rs");
example!(sample_ras, "../examples/sample_ras.rs");
example!(ranking_continuity, "../examples/ranking_continuity.rs");
example!(activation_map, "../examples/activation_map.rs");
example!(quality_sweep, "../examples/quality_sweep.rs");
example!(checkpoint_inspect, "../examples/checkpoint_inspect.rs");
