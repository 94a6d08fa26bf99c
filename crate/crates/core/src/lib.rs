pub mod city;
pub mod config;
pub mod engine;
pub mod falls;
pub mod metrics;
pub mod mutualism;
pub mod protocol;
pub mod runner;
