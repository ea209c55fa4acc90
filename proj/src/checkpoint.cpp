#include "wsvd/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "wsvd/errors.hpp"
#include "wsvd/factorize.hpp"

namespace wsvd::ckpt {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

constexpr char kIntMagic[8] = {'W', 'S', 'V', 'D', 'I', '8', 'T', '1'};

void put_u64(std::ostream& os, std::uint64_t v) {
    char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(buf, 8);
}

std::uint64_t get_u64(std::istream& is) {
    char buf[8];
    is.read(buf, 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
    }
    return v;
}

std::string factor_stem(std::size_t layer, factorize::Role role, std::size_t head) {
    return "layer" + std::to_string(layer) + "." + factorize::role_name(role) + ".h" +
           std::to_string(head);
}

} // namespace

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw IoError("malformed JSON in " + path.string());
    return j;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("short write to " + path.string());
}

json config_to_json(const toy::ModelConfig& cfg) {
    json j;
    j["embed_dim"] = cfg.embed_dim;
    j["head_dim"] = cfg.head_dim;
    j["n_heads"] = cfg.n_heads;
    j["n_layers"] = cfg.n_layers;
    j["ffn_dim"] = cfg.ffn_dim;
    j["task_dim"] = cfg.task_dim;
    j["seed"] = cfg.seed;
    j["outlier_channels"] = cfg.outlier_channels;
    j["outlier_factor"] = cfg.outlier_factor;
    return j;
}

toy::ModelConfig config_from_json(const json& j) {
    toy::ModelConfig cfg;
    cfg.embed_dim = j.at("embed_dim").get<std::size_t>();
    cfg.head_dim = j.at("head_dim").get<std::size_t>();
    cfg.n_heads = j.at("n_heads").get<std::size_t>();
    cfg.n_layers = j.at("n_layers").get<std::size_t>();
    cfg.ffn_dim = j.at("ffn_dim").get<std::size_t>();
    cfg.task_dim = j.at("task_dim").get<std::size_t>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.outlier_channels = j.at("outlier_channels").get<std::size_t>();
    cfg.outlier_factor = j.at("outlier_factor").get<double>();
    return cfg;
}

namespace {

json save_weight_quant(const fs::path& dir, const std::string& stem,
                       const quant::WeightQuant& wq) {
    save_int_matrix(dir / (stem + ".i8"), wq.q);
    Matrix scales(1, wq.scales.size());
    for (std::size_t i = 0; i < wq.scales.size(); ++i) scales(0, i) = wq.scales[i];
    save_matrix(dir / (stem + ".scale.wsvd"), scales);
    json j;
    j["values"] = stem + ".i8";
    j["scales"] = stem + ".scale.wsvd";
    j["clip"] = wq.clip;
    j["bits"] = wq.bits;
    return j;
}

quant::WeightQuant load_weight_quant(const fs::path& dir, const json& j) {
    quant::WeightQuant wq;
    wq.q = load_int_matrix(dir / j.at("values").get<std::string>());
    Matrix scales = load_matrix(dir / j.at("scales").get<std::string>());
    if (scales.rows() != 1 || scales.cols() != wq.q.cols) {
        throw IoError("scale row does not match integer tensor width in " + dir.string());
    }
    wq.scales.assign(scales.data().begin(), scales.data().end());
    wq.clip = j.at("clip").get<double>();
    wq.bits = j.at("bits").get<int>();
    return wq;
}

} // namespace

void save_int_matrix(const fs::path& path, const quant::IntMatrix& m) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(kIntMagic, 8);
    put_u64(out, m.rows);
    put_u64(out, m.cols);
    if (!m.data.empty()) {
        out.write(reinterpret_cast<const char*>(m.data.data()),
                  static_cast<std::streamsize>(m.data.size()));
    }
    if (!out) throw IoError("short write to " + path.string());
}

quant::IntMatrix load_int_matrix(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kIntMagic, 8) != 0) {
        throw IoError("bad int tensor magic in " + path.string());
    }
    const std::uint64_t rows = get_u64(in);
    const std::uint64_t cols = get_u64(in);
    if (!in) throw IoError("truncated header in " + path.string());
    quant::IntMatrix m(rows, cols);
    if (!m.data.empty()) {
        in.read(reinterpret_cast<char*>(m.data.data()),
                static_cast<std::streamsize>(m.data.size()));
    }
    if (!in) throw IoError("truncated int tensor in " + path.string());
    return m;
}

const char* stage_name(Stage s) {
    switch (s) {
        case Stage::Dense: return "dense";
        case Stage::Factored: return "factored";
        case Stage::Finetuned: return "finetuned";
        case Stage::Quantized: return "quantized";
    }
    return "?";
}

Stage stage_from_name(const std::string& name) {
    if (name == "dense") return Stage::Dense;
    if (name == "factored") return Stage::Factored;
    if (name == "finetuned") return Stage::Finetuned;
    if (name == "quantized") return Stage::Quantized;
    throw IoError("unknown checkpoint stage '" + name + "'");
}

void save(const fs::path& dir, const Checkpoint& c) {
    c.config.validate();
    if (c.dense.layers.size() != c.config.n_layers) {
        throw ShapeError("checkpoint holds " + std::to_string(c.dense.layers.size()) +
                         " dense layers, config says " + std::to_string(c.config.n_layers));
    }
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

    json manifest;
    manifest["schema"] = kSchema;
    manifest["stage"] = stage_name(c.stage);
    manifest["model"] = config_to_json(c.config);

    json weights = json::object();
    for (std::size_t li = 0; li < c.dense.layers.size(); ++li) {
        for (toy::WeightKind kind : {toy::WeightKind::Q, toy::WeightKind::K, toy::WeightKind::V,
                                     toy::WeightKind::O, toy::WeightKind::Ff1,
                                     toy::WeightKind::Ff2}) {
            const toy::WeightId id{li, kind};
            const std::string name = toy::weight_name(id);
            const std::string file = name + ".wsvd";
            save_matrix(dir / file, toy::select(c.dense, id));
            weights[name] = file;
        }
    }
    manifest["weights"] = weights;

    if (!c.factors.empty()) {
        json arr = json::array();
        for (const decode::LayerFactors& layer : c.factors) {
            for (std::size_t h = 0; h < layer.heads.size(); ++h) {
                for (const factorize::HeadFactors* f :
                     {&layer.heads[h].q, &layer.heads[h].k, &layer.heads[h].v}) {
                    const std::string stem = factor_stem(f->layer, f->role, f->head);
                    save_matrix(dir / (stem + ".a.wsvd"), f->a);
                    save_matrix(dir / (stem + ".b.wsvd"), f->b);
                    json e;
                    e["layer"] = f->layer;
                    e["role"] = factorize::role_name(f->role);
                    e["head"] = f->head;
                    e["rank"] = f->rank;
                    e["a"] = stem + ".a.wsvd";
                    e["b"] = stem + ".b.wsvd";
                    arr.push_back(e);
                }
            }
        }
        manifest["factors"] = arr;
    }

    if (!c.quantized.empty()) {
        manifest["weight_bits"] = c.weight_bits;
        manifest["activation_bits"] = c.activation_bits;
        manifest["input_rotation"] = "hadamard"; // S1 is the scaled Hadamard of width embed_dim
        json arr = json::array();
        for (const LayerQuant& layer : c.quantized) {
            for (const HeadQuant& hq : layer.heads) {
                for (const quant::QuantizedFactors* f : {&hq.q, &hq.k, &hq.v}) {
                    const std::string stem =
                        factor_stem(f->layer, f->role, f->head) + ".q";
                    save_matrix(dir / (stem + ".s2.wsvd"), f->s2_skew);
                    json e;
                    e["layer"] = f->layer;
                    e["role"] = factorize::role_name(f->role);
                    e["head"] = f->head;
                    e["rank"] = f->rank;
                    e["a"] = save_weight_quant(dir, stem + ".a", f->a);
                    e["b"] = save_weight_quant(dir, stem + ".b", f->b);
                    e["s2_skew"] = stem + ".s2.wsvd";
                    arr.push_back(e);
                }
            }
        }
        manifest["quantized"] = arr;
    }

    write_json(dir / "manifest.json", manifest);
}

Checkpoint load(const fs::path& dir) {
    const json manifest = read_json(dir / "manifest.json");
    if (manifest.value("schema", "") != kSchema) {
        throw IoError("unsupported manifest schema in " + dir.string());
    }
    Checkpoint c;
    c.stage = stage_from_name(manifest.at("stage").get<std::string>());
    c.config = config_from_json(manifest.at("model"));
    c.config.validate();

    c.dense.layers.resize(c.config.n_layers);
    const json& weights = manifest.at("weights");
    for (std::size_t li = 0; li < c.config.n_layers; ++li) {
        for (toy::WeightKind kind : {toy::WeightKind::Q, toy::WeightKind::K, toy::WeightKind::V,
                                     toy::WeightKind::O, toy::WeightKind::Ff1,
                                     toy::WeightKind::Ff2}) {
            const toy::WeightId id{li, kind};
            const std::string name = toy::weight_name(id);
            if (!weights.contains(name)) {
                throw IoError("manifest in " + dir.string() + " is missing weight " + name);
            }
            toy::select(c.dense, id) = load_matrix(dir / weights.at(name).get<std::string>());
        }
    }

    if (manifest.contains("factors")) {
        c.factors.assign(c.config.n_layers, decode::LayerFactors{});
        for (decode::LayerFactors& lf : c.factors) {
            lf.embed_dim = c.config.embed_dim;
            lf.head_dim = c.config.head_dim;
            lf.heads.resize(c.config.n_heads);
        }
        for (const json& e : manifest.at("factors")) {
            factorize::HeadFactors f;
            f.layer = e.at("layer").get<std::size_t>();
            f.head = e.at("head").get<std::size_t>();
            f.role = factorize::role_from_name(e.at("role").get<std::string>());
            f.rank = e.at("rank").get<std::size_t>();
            f.a = load_matrix(dir / e.at("a").get<std::string>());
            f.b = load_matrix(dir / e.at("b").get<std::string>());
            if (f.layer >= c.config.n_layers || f.head >= c.config.n_heads) {
                throw IoError("factor entry out of range in " + dir.string());
            }
            if (f.a.rows() != c.config.embed_dim || f.a.cols() != f.rank ||
                f.b.rows() != f.rank || f.b.cols() != c.config.head_dim) {
                throw IoError("factor shapes disagree with manifest rank for " +
                              factor_stem(f.layer, f.role, f.head));
            }
            decode::HeadProjection& hp = c.factors[f.layer].heads[f.head];
            switch (f.role) {
                case factorize::Role::Q: hp.q = std::move(f); break;
                case factorize::Role::K: hp.k = std::move(f); break;
                case factorize::Role::V: hp.v = std::move(f); break;
            }
        }
    }

    if (manifest.contains("quantized")) {
        c.weight_bits = manifest.at("weight_bits").get<int>();
        c.activation_bits = manifest.at("activation_bits").get<int>();
        c.quantized.assign(c.config.n_layers, LayerQuant{});
        for (LayerQuant& lq : c.quantized) lq.heads.resize(c.config.n_heads);
        for (const json& e : manifest.at("quantized")) {
            quant::QuantizedFactors f;
            f.layer = e.at("layer").get<std::size_t>();
            f.head = e.at("head").get<std::size_t>();
            f.role = factorize::role_from_name(e.at("role").get<std::string>());
            f.rank = e.at("rank").get<std::size_t>();
            f.weight_bits = c.weight_bits;
            f.a = load_weight_quant(dir, e.at("a"));
            f.b = load_weight_quant(dir, e.at("b"));
            f.s2_skew = load_matrix(dir / e.at("s2_skew").get<std::string>());
            if (f.layer >= c.config.n_layers || f.head >= c.config.n_heads) {
                throw IoError("quantized entry out of range in " + dir.string());
            }
            HeadQuant& hq = c.quantized[f.layer].heads[f.head];
            switch (f.role) {
                case factorize::Role::Q: hq.q = std::move(f); break;
                case factorize::Role::K: hq.k = std::move(f); break;
                case factorize::Role::V: hq.v = std::move(f); break;
            }
        }
    }
    return c;
}

void save_fisher(const fs::path& dir, const FisherArtifacts& f) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    json manifest;
    manifest["schema"] = kFisherSchema;
    manifest["sample_count"] = f.sample_count;
    const auto dump = [&](const char* key, const std::map<std::string, Matrix>& group,
                          const char* suffix) {
        json files = json::object();
        for (const auto& [name, m] : group) {
            const std::string file = name + suffix;
            save_matrix(dir / file, m);
            files[name] = file;
        }
        manifest[key] = files;
    };
    dump("scores", f.scores, ".fisher.wsvd");
    dump("rotated", f.rotated, ".fisher_rot.wsvd");
    dump("mean_gradient", f.mean_gradient, ".grad.wsvd");
    write_json(dir / "fisher.json", manifest);
}

FisherArtifacts load_fisher(const fs::path& dir) {
    const json manifest = read_json(dir / "fisher.json");
    if (manifest.value("schema", "") != kFisherSchema) {
        throw IoError("unsupported importance-score schema in " + dir.string());
    }
    FisherArtifacts f;
    f.sample_count = manifest.at("sample_count").get<std::size_t>();
    const auto slurp = [&](const char* key, std::map<std::string, Matrix>& group) {
        if (!manifest.contains(key)) return;
        for (const auto& [name, file] : manifest.at(key).items()) {
            group.emplace(name, load_matrix(dir / file.get<std::string>()));
        }
    };
    slurp("scores", f.scores);
    slurp("rotated", f.rotated);
    slurp("mean_gradient", f.mean_gradient);
    return f;
}

} // namespace wsvd::ckpt
