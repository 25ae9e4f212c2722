pub mod endpoint;
pub mod expr;
pub mod fixtures;
pub mod geometry;
pub mod liapounoff;
pub mod needle;
pub mod par;
pub mod pmp;
pub mod problem;
pub mod report;
pub mod second_order;
pub mod selftest;
pub mod trajectory;
pub mod variations;

#[cfg(test)]
mod testutil;
