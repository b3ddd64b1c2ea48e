//! Zero-shot evaluation: IoU, interior distance transforms, the
//! farthest-from-boundary click protocol, and box-prompted scoring with
//! size buckets.

mod distance;
mod mask;
mod protocol;

pub use distance::{boundary_distance, EXACT_LIMIT};
pub use mask::{iou, MaskBitmap};
pub use protocol::{
    box_eval, click_episode, click_eval, initial_click, next_click, size_bucket, BoxEvalReport,
    Click, ClickEvalReport, ClickRecord, ClickState, EvalItem, MaskBoxRow, MaskClickRow,
    Segmenter, SizeBucket, CLICK_BUDGETS,
};
