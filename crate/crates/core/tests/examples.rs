//! Runs the quick examples so they stay working.

macro_rules! example {
    ($test:ident, $file:literal) => {
        #[test]
        fn $test() {
            mod ex {
                include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/", $file));
                pub fn run() {
                    main()
                }
            }
            ex::run();
        }
    };
}

example!(optimize_pipeline_runs, "optimize_pipeline.rs");
example!(shared_parameters_runs, "shared_parameters.rs");
example!(request_response_runs, "request_response.rs");
example!(batch_engine_runs, "batch_engine.rs");
example!(bundles_runs, "bundles.rs");
example!(materialization_runs, "materialization.rs");
example!(queue_policy_runs, "queue_policy.rs");
example!(load_trace_runs, "load_trace.rs");
