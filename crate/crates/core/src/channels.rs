//! Channel layout shared by agent feature images, BEV maps and the
//! detector input.
//!
//! | range    | content                                    |
//! |----------|--------------------------------------------|
//! | `0..4`   | class one-hot (car, truck, bus, pedestrian) |
//! | `4..6`   | BEV offset to the object centre (m)        |
//! | `6..9`   | log size `(l, w, h)`                       |
//! | `9..11`  | `(sin yaw, cos yaw)`                       |
//! | `11..13` | velocity `(vx, vy)` (m/s)                  |

use std::ops::Range;

pub const NUM_CLASSES: usize = 4;
pub const CLASS: Range<usize> = 0..4;
pub const OFFSET: Range<usize> = 4..6;
pub const LOG_SIZE: Range<usize> = 6..9;
pub const YAW: Range<usize> = 9..11;
pub const VELOCITY: Range<usize> = 11..13;
pub const NUM_CHANNELS: usize = 13;
