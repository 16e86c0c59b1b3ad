#include "fptq/serialize.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace fptq {

namespace {

using nlohmann::json;

void put_le_bytes(std::string& out, std::uint64_t v, int n_bytes) {
    for (int i = 0; i < n_bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_le_bytes(const std::string& in, std::size_t& pos, int n_bytes) {
    if (pos + static_cast<std::size_t>(n_bytes) > in.size())
        throw std::invalid_argument("tensor data file truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < n_bytes; ++i)
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos++])) << (8 * i);
    return v;
}

void append_values(std::string& out, const std::vector<double>& values, Dtype dtype) {
    for (double v : values) {
        if (dtype == Dtype::f32) {
            const float f = static_cast<float>(v);
            std::uint32_t bits;
            std::memcpy(&bits, &f, sizeof(bits));
            put_le_bytes(out, bits, 4);
        } else {
            std::uint64_t bits;
            std::memcpy(&bits, &v, sizeof(bits));
            put_le_bytes(out, bits, 8);
        }
    }
}

std::vector<double> read_values(const std::string& in, std::size_t& pos, std::size_t count, Dtype dtype) {
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i) {
        if (dtype == Dtype::f32) {
            const std::uint32_t bits = static_cast<std::uint32_t>(get_le_bytes(in, pos, 4));
            float f;
            std::memcpy(&f, &bits, sizeof(f));
            values[i] = static_cast<double>(f);
        } else {
            const std::uint64_t bits = get_le_bytes(in, pos, 8);
            double d;
            std::memcpy(&d, &bits, sizeof(d));
            values[i] = d;
        }
    }
    return values;
}

struct TensorWriter {
    explicit TensorWriter(Dtype dtype_) : dtype(dtype_) {}

    Dtype dtype;
    json manifest_tensors = json::array();
    std::string data;

    void add(const std::string& name, const Matrix& m) {
        manifest_tensors.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}});
        append_values(data, m.data(), dtype);
    }
    void add(const std::string& name, const std::vector<double>& v) {
        manifest_tensors.push_back({{"name", name}, {"shape", {static_cast<index_t>(v.size())}}});
        append_values(data, v, dtype);
    }
};

struct TensorReader {
    const json& manifest_tensors;
    const std::string& data;
    Dtype dtype;
    std::size_t tensor_idx = 0;
    std::size_t pos = 0;

    json expect(const std::string& name) {
        if (tensor_idx >= manifest_tensors.size())
            throw std::invalid_argument("manifest ended before tensor " + name);
        const json entry = manifest_tensors[tensor_idx++];
        if (entry.at("name").get<std::string>() != name)
            throw std::invalid_argument("manifest tensor order mismatch: expected " + name + ", found " +
                                        entry.at("name").get<std::string>());
        return entry;
    }

    Matrix matrix(const std::string& name) {
        const json entry = expect(name);
        const auto shape = entry.at("shape").get<std::vector<index_t>>();
        if (shape.size() != 2) throw std::invalid_argument("tensor " + name + " is not 2-D");
        auto values = read_values(data, pos, static_cast<std::size_t>(shape[0] * shape[1]), dtype);
        return Matrix(shape[0], shape[1], std::move(values), dtype);
    }

    std::vector<double> vector(const std::string& name) {
        const json entry = expect(name);
        const auto shape = entry.at("shape").get<std::vector<index_t>>();
        if (shape.size() != 1) throw std::invalid_argument("tensor " + name + " is not 1-D");
        return read_values(data, pos, static_cast<std::size_t>(shape[0]), dtype);
    }
};

}  // namespace

json model_config_to_json(const ModelConfig& cfg) {
    return json{{"d_model", cfg.d_model},       {"n_blocks", cfg.n_blocks},
                {"n_q_heads", cfg.n_q_heads},   {"n_kv_heads", cfg.n_kv_heads},
                {"d_head", cfg.d_head},         {"d_ffn", cfg.d_ffn},
                {"vocab", cfg.vocab},           {"rope_thetas", cfg.thetas()},
                {"seed", cfg.seed},             {"init_std", cfg.init_std},
                {"dtype", dtype_name(cfg.dtype)}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig cfg;
    cfg.d_model = j.at("d_model").get<index_t>();
    cfg.n_blocks = j.at("n_blocks").get<index_t>();
    cfg.n_q_heads = j.at("n_q_heads").get<index_t>();
    cfg.n_kv_heads = j.at("n_kv_heads").get<index_t>();
    cfg.d_head = j.at("d_head").get<index_t>();
    cfg.d_ffn = j.at("d_ffn").get<index_t>();
    cfg.vocab = j.at("vocab").get<index_t>();
    cfg.rope_thetas = j.at("rope_thetas").get<std::vector<double>>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.init_std = j.at("init_std").get<double>();
    cfg.dtype = dtype_from_name(j.at("dtype").get<std::string>());
    cfg.validate();
    return cfg;
}

namespace {

void write_binary_file(const std::string& path, const std::string& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::invalid_argument("cannot open for writing: " + path);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw std::invalid_argument("write failed: " + path);
}

std::string read_binary_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("cannot open: " + path);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::string basename_of(const std::string& path) {
    const auto slash = path.find_last_of('/');
    return slash == std::string::npos ? path : path.substr(slash + 1);
}

}  // namespace

std::string read_text_file(const std::string& path) { return read_binary_file(path); }

void write_text_file(const std::string& path, const std::string& contents) {
    write_binary_file(path, contents);
}

void save_model(const ModelParams& params, const std::string& prefix) {
    params.validate();
    TensorWriter w(params.config.dtype);
    w.add("embedding", params.embedding);
    for (std::size_t i = 0; i < params.blocks.size(); ++i) {
        const auto& b = params.blocks[i];
        const std::string base = "blocks." + std::to_string(i) + ".";
        w.add(base + "w_q", b.w_q);
        w.add(base + "w_k", b.w_k);
        w.add(base + "w_v", b.w_v);
        w.add(base + "w_o", b.w_o);
        w.add(base + "w_g", b.w_g);
        w.add(base + "w_u", b.w_u);
        w.add(base + "w_d", b.w_d);
        w.add(base + "gamma_attn", b.gamma_attn);
        w.add(base + "gamma_mlp", b.gamma_mlp);
    }
    w.add("gamma_final", params.gamma_final);
    w.add("head", params.head);

    json manifest{{"format", "fptq-model"},
                  {"schema_version", 1},
                  {"dtype", dtype_name(params.config.dtype)},
                  {"config", model_config_to_json(params.config)},
                  {"tensors", w.manifest_tensors},
                  {"data_file", basename_of(prefix) + ".bin"}};
    write_text_file(prefix + ".json", manifest.dump(2) + "\n");
    write_binary_file(prefix + ".bin", w.data);
}

ModelParams load_model(const std::string& prefix) {
    const json manifest = json::parse(read_text_file(prefix + ".json"));
    if (manifest.at("format").get<std::string>() != "fptq-model")
        throw std::invalid_argument("not a model manifest: " + prefix + ".json");
    const Dtype dtype = dtype_from_name(manifest.at("dtype").get<std::string>());
    const std::string data = read_binary_file(prefix + ".bin");

    ModelParams params;
    params.config = model_config_from_json(manifest.at("config"));
    TensorReader r{manifest.at("tensors"), data, dtype};
    params.embedding = r.matrix("embedding");
    params.blocks.resize(static_cast<std::size_t>(params.config.n_blocks));
    for (std::size_t i = 0; i < params.blocks.size(); ++i) {
        auto& b = params.blocks[i];
        const std::string base = "blocks." + std::to_string(i) + ".";
        b.w_q = r.matrix(base + "w_q");
        b.w_k = r.matrix(base + "w_k");
        b.w_v = r.matrix(base + "w_v");
        b.w_o = r.matrix(base + "w_o");
        b.w_g = r.matrix(base + "w_g");
        b.w_u = r.matrix(base + "w_u");
        b.w_d = r.matrix(base + "w_d");
        b.gamma_attn = r.vector(base + "gamma_attn");
        b.gamma_mlp = r.vector(base + "gamma_mlp");
    }
    params.gamma_final = r.vector("gamma_final");
    params.head = r.matrix("head");
    if (r.pos != data.size()) throw std::invalid_argument("trailing bytes in " + prefix + ".bin");
    params.validate();
    return params;
}

void save_transform_set(const TransformSet& set, const ModelConfig& cfg, const std::string& prefix) {
    TensorWriter w(Dtype::f64);  // transform parameters always stored in double
    json entries = json::array();
    if (set.prerope) {
        set.prerope->validate(cfg);
        entries.push_back({{"type", "prerope"}});
        for (std::size_t b = 0; b < set.prerope->blocks.size(); ++b)
            for (std::size_t h = 0; h < set.prerope->blocks[b].size(); ++h) {
                const auto& head = set.prerope->blocks[b][h];
                const std::string base = "prerope.b" + std::to_string(b) + ".h" + std::to_string(h) + ".";
                w.add(base + "scales", head.scales);
                w.add(base + "angles", head.angles);
            }
    }
    if (set.value) {
        set.value->validate(cfg);
        entries.push_back({{"type", "value"}});
        for (std::size_t b = 0; b < set.value->blocks.size(); ++b)
            for (std::size_t h = 0; h < set.value->blocks[b].size(); ++h)
                w.add("value.b" + std::to_string(b) + ".h" + std::to_string(h), set.value->blocks[b][h]);
    }
    if (set.upscaler) {
        set.upscaler->validate(cfg);
        entries.push_back({{"type", "upscaler"}});
        for (std::size_t b = 0; b < set.upscaler->blocks.size(); ++b)
            w.add("upscaler.b" + std::to_string(b), set.upscaler->blocks[b]);
    }
    if (set.rotation) {
        set.rotation->validate(cfg.d_model);
        entries.push_back({{"type", "rotation"}});
        w.add("rotation", set.rotation->rotation);
    }
    if (set.hadamard) {
        entries.push_back({{"type", "hadamard"}, {"dim", set.hadamard->dim}, {"blocks", set.hadamard->blocks}});
    }
    if (set.residual_scaling) entries.push_back({{"type", "resscale"}});

    json manifest{{"format", "fptq-transforms"}, {"schema_version", 1},
                  {"transforms", entries},       {"tensors", w.manifest_tensors},
                  {"data_file", basename_of(prefix) + ".bin"}};
    write_text_file(prefix + ".json", manifest.dump(2) + "\n");
    write_binary_file(prefix + ".bin", w.data);
}

TransformSet load_transform_set(const std::string& prefix, const ModelConfig& cfg) {
    const json manifest = json::parse(read_text_file(prefix + ".json"));
    if (manifest.at("format").get<std::string>() != "fptq-transforms")
        throw std::invalid_argument("not a transform manifest: " + prefix + ".json");
    const std::string data = read_binary_file(prefix + ".bin");
    TensorReader r{manifest.at("tensors"), data, Dtype::f64};

    TransformSet set;
    for (const json& entry : manifest.at("transforms")) {
        const std::string type = entry.at("type").get<std::string>();
        if (type == "prerope") {
            PreRopeTransform t = PreRopeTransform::identity(cfg);
            for (std::size_t b = 0; b < t.blocks.size(); ++b)
                for (std::size_t h = 0; h < t.blocks[b].size(); ++h) {
                    const std::string base = "prerope.b" + std::to_string(b) + ".h" + std::to_string(h) + ".";
                    t.blocks[b][h].scales = r.vector(base + "scales");
                    t.blocks[b][h].angles = r.vector(base + "angles");
                }
            t.validate(cfg);
            set.prerope = std::move(t);
        } else if (type == "value") {
            ValueTransform t = ValueTransform::identity(cfg);
            for (std::size_t b = 0; b < t.blocks.size(); ++b)
                for (std::size_t h = 0; h < t.blocks[b].size(); ++h)
                    t.blocks[b][h] = r.matrix("value.b" + std::to_string(b) + ".h" + std::to_string(h));
            t.validate(cfg);
            set.value = std::move(t);
        } else if (type == "upscaler") {
            UpScaler t = UpScaler::identity(cfg);
            for (std::size_t b = 0; b < t.blocks.size(); ++b)
                t.blocks[b] = r.vector("upscaler.b" + std::to_string(b));
            t.validate(cfg);
            set.upscaler = std::move(t);
        } else if (type == "rotation") {
            ResidualRotation t{r.matrix("rotation")};
            t.validate(cfg.d_model);
            set.rotation = std::move(t);
        } else if (type == "hadamard") {
            set.hadamard = BlockHadamardPlan(entry.at("dim").get<index_t>(),
                                             entry.at("blocks").get<std::vector<index_t>>());
        } else if (type == "resscale") {
            set.residual_scaling = true;
        } else {
            throw std::invalid_argument("unknown transform type in manifest: " + type);
        }
    }
    return set;
}

}  // namespace fptq
