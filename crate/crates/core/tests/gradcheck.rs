mod common;

use common::{batch_of, gradcheck, model_and_windows, small_log};
use kt_core::models::{Mode, ModelKind};

/// Every parameter coordinate of every model, dropout on (with a fixed
/// mask), at the smallest supported configuration.
#[test]
fn analytic_gradients_match_central_differences() {
    let log = small_log(6, 20, 4, 11, 12);
    for kind in ModelKind::ALL {
        let (mut model, windows) = model_and_windows(kind, &log, 20, 8, 8, 7);
        let windows: Vec<_> = windows.into_iter().take(4).collect();
        let batch = batch_of(&model, &log, &windows);
        let r = gradcheck(&mut model, &batch, Mode::Train, 1e-5, 1e-4, 1e-6);
        eprintln!("{kind}: {r:?}");
        assert!(r.pass_rate() >= 0.99, "{kind}: {r:?}");
    }
}
