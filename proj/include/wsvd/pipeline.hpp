#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "wsvd/decode.hpp"
#include "wsvd/toymodel.hpp"

namespace wsvd::pipe {

inline constexpr const char* kConfigSchema = "wsvd-pipeline-v1";
inline constexpr const char* kReportSchema = "wsvd-report-v1";

/// Everything one end-to-end run needs. Loaded from a versioned JSON file;
/// unknown keys are rejected so typos cannot silently fall back to defaults.
struct PipelineConfig {
    toy::ModelConfig model;
    std::size_t calib_samples = 64;
    std::size_t calib_seq_len = 64;
    double rho1 = 0.6;
    bool uniform_rank = false;
    std::size_t ft_steps = 100;
    double ft_lr = 1e-4;
    bool qat_enabled = true;
    std::size_t qat_steps = 50;
    double qat_lr = 1e-5;
    int weight_bits = 8;
    int activation_bits = 8;
    std::size_t tile_len = 32;
    std::size_t decode_seq_len = 64;
    std::size_t jobs = 1;
    std::filesystem::path out_dir = "out";

    void validate() const;
};

PipelineConfig config_from_json_text(const std::string& text);
PipelineConfig config_from_file(const std::filesystem::path& path);

/// Numbers the caller (CLI, tests) may want without re-reading report.json.
struct PipelineResult {
    std::filesystem::path report_path;
    std::vector<std::string> stages_run;    // stages computed this invocation
    std::vector<std::string> stages_loaded; // stages restored from artifacts
    double achieved_rho1 = 0.0;
    double achieved_rho2 = 0.0;
    double ft_mean_initial = 0.0;
    double ft_mean_final = 0.0;
    double qat_mean_initial = 0.0;
    double qat_mean_final = 0.0;
    double qat_max_s2_defect = 0.0;
    double decode_max_abs_diff = 0.0;  // fused factored decode vs dense streamed decode
    double dense_stream_vs_batch = 0.0; // dense streamed decode vs whole-sequence forward
};

/// Streams every token of x through the stack token by token, attention
/// served from per-head latent caches with fused reconstruction; the dense
/// w_o and feed-forward blocks run unchanged. Counters accumulate across all
/// tokens and layers.
Matrix decode_factored(const toy::ModelConfig& cfg, const toy::AttentionWeights& w,
                       const std::vector<decode::LayerFactors>& factors, const Matrix& x,
                       const decode::TileConfig& tiles, decode::TrafficCounter& counter);

/// Same token-by-token schedule with dense per-head caches and streamed
/// attention; matches the whole-sequence forward pass up to reassociation.
Matrix decode_dense(const toy::ModelConfig& cfg, const toy::AttentionWeights& w, const Matrix& x,
                    const decode::TileConfig& tiles, decode::TrafficCounter& counter);

/// Runs dense -> fisher -> compress -> finetune -> [qat] -> decode, leaving
/// per-stage artifacts under cfg.out_dir plus a deterministic report.json
/// (wall-clock times go to timings.json, which is the only file allowed to
/// differ between identical runs). Completed stages recorded in
/// pipeline_state.json are reloaded instead of recomputed when the config
/// matches; a stage failure rethrows with the stage name after updating the
/// state file.
PipelineResult run_pipeline(const PipelineConfig& cfg);

} // namespace wsvd::pipe
