#![allow(dead_code)]

pub mod naive_engine;
pub mod streams;
