#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "wsvd/decode.hpp"
#include "wsvd/matrix.hpp"
#include "wsvd/quant.hpp"
#include "wsvd/toymodel.hpp"

namespace wsvd::ckpt {

inline constexpr const char* kSchema = "wsvd-checkpoint-v1";
inline constexpr const char* kFisherSchema = "wsvd-fisher-v1";

/// Insertion-ordered JSON keeps every serialized document byte-stable.
nlohmann::ordered_json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j);

nlohmann::ordered_json config_to_json(const toy::ModelConfig& cfg);
toy::ModelConfig config_from_json(const nlohmann::ordered_json& j);

/// Row-major int8 tensor file, magic "WSVDI8T1", u64 LE rows and cols.
void save_int_matrix(const std::filesystem::path& path, const quant::IntMatrix& m);
quant::IntMatrix load_int_matrix(const std::filesystem::path& path);

enum class Stage { Dense, Factored, Finetuned, Quantized };
const char* stage_name(Stage s);
Stage stage_from_name(const std::string& name);

struct HeadQuant {
    quant::QuantizedFactors q, k, v;
};

struct LayerQuant {
    std::vector<HeadQuant> heads;
};

/// One on-disk model snapshot. The dense weights are always present (later
/// stages keep them as the approximation target); factors appear from the
/// factored stage on, integer tensors only in the quantized stage.
struct Checkpoint {
    Stage stage = Stage::Dense;
    toy::ModelConfig config;
    toy::AttentionWeights dense;
    std::vector<decode::LayerFactors> factors;
    std::vector<LayerQuant> quantized;
    int weight_bits = 8;
    int activation_bits = 8;
};

/// Writes manifest.json plus one tensor file per matrix into dir (created if
/// missing). Same checkpoint in, byte-identical files out.
void save(const std::filesystem::path& dir, const Checkpoint& c);
Checkpoint load(const std::filesystem::path& dir);

/// Importance scores accumulated over a calibration run, keyed by weight
/// name. rotated holds the pre-rotation-space variant where requested.
struct FisherArtifacts {
    std::size_t sample_count = 0;
    std::map<std::string, Matrix> scores;
    std::map<std::string, Matrix> rotated;
    std::map<std::string, Matrix> mean_gradient;
};

void save_fisher(const std::filesystem::path& dir, const FisherArtifacts& f);
FisherArtifacts load_fisher(const std::filesystem::path& dir);

} // namespace wsvd::ckpt
