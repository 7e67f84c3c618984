#include "quantlab/checkpoint_io.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace quantlab {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'Q', 'L', 'A', 'B', '1', '\0', '\0', '\0'};

json config_to_json(const ModelConfig& c) {
    return json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
                {"d_ff", c.d_ff},             {"max_seq", c.max_seq},
                {"rope_base", c.rope_base},   {"tie_embeddings", c.tie_embeddings},
                {"norm_eps", c.norm_eps}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<size_t>();
    c.d_model = j.at("d_model").get<size_t>();
    c.n_layers = j.at("n_layers").get<size_t>();
    c.n_heads = j.at("n_heads").get<size_t>();
    c.d_ff = j.at("d_ff").get<size_t>();
    c.max_seq = j.at("max_seq").get<size_t>();
    c.rope_base = j.at("rope_base").get<double>();
    c.tie_embeddings = j.at("tie_embeddings").get<bool>();
    c.norm_eps = j.at("norm_eps").get<double>();
    c.validate();
    return c;
}

void append_f32(std::string& payload, const std::vector<float>& vals) {
    static_assert(sizeof(float) == 4);
    const size_t base = payload.size();
    payload.resize(base + vals.size() * 4);
    std::memcpy(payload.data() + base, vals.data(), vals.size() * 4);
}

std::vector<float> matrix_to_f32(const Matrix& m) {
    std::vector<float> out(m.size());
    for (size_t i = 0; i < m.size(); ++i) out[i] = static_cast<float>(m.data[i]);
    return out;
}

const char* dtype_of(const QTensorEntry& e) {
    if (e.kind == QTensorEntry::Kind::f32) return "f32";
    switch (e.qt.bits) {
        case 2: return "q2";
        case 4: return "q4";
        case 8: return "q8";
    }
    throw validation_error("unsupported bit width");
}

}  // namespace

void write_qlab(const std::string& path, const QuantizedModel& qm) {
    validate_quantized_model(qm);
    std::string payload;
    json tensors = json::array();
    for (const auto& name : tensor_names(qm.config)) {
        const QTensorEntry& e = qm.entries.at(name);
        const size_t offset = payload.size();
        size_t group_size = 0;
        if (e.kind == QTensorEntry::Kind::f32) {
            append_f32(payload, matrix_to_f32(e.f32));
        } else {
            group_size = e.qt.group_size;
            payload.append(reinterpret_cast<const char*>(e.qt.codes.data()),
                           e.qt.codes.size());
            append_f32(payload, e.qt.scales);
            append_f32(payload, e.qt.zeros);
        }
        const auto [r, c] = tensor_shape(qm.config, name);
        tensors.push_back(json{{"name", name},
                               {"dtype", dtype_of(e)},
                               {"shape", json::array({r, c})},
                               {"group_size", group_size},
                               {"byte_offset", offset},
                               {"byte_length", payload.size() - offset}});
    }
    json header{{"format_version", qm.format_version},
                {"config", config_to_json(qm.config)},
                {"tensors", tensors}};
    const std::string header_str = header.dump();
    if (header_str.size() > 0xffffffffull) throw io_error("header too large");

    std::string out;
    out.append(kMagic, sizeof(kMagic));
    const auto hlen = static_cast<uint32_t>(header_str.size());
    char lenbuf[4] = {static_cast<char>(hlen & 0xff), static_cast<char>((hlen >> 8) & 0xff),
                      static_cast<char>((hlen >> 16) & 0xff),
                      static_cast<char>((hlen >> 24) & 0xff)};
    out.append(lenbuf, 4);
    out += header_str;
    out += payload;
    write_file_bytes(path, out);
}

void write_qlab(const std::string& path, const ModelCheckpoint& model) {
    write_qlab(path, from_checkpoint(model));
}

QuantizedModel read_qlab(const std::string& path) {
    const std::string bytes = read_file_bytes(path);
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
        throw io_error("'" + path + "' is not a QLAB1 file");
    uint32_t hlen = 0;
    for (int i = 3; i >= 0; --i)
        hlen = (hlen << 8) | static_cast<unsigned char>(bytes[8 + i]);
    if (bytes.size() < 12ull + hlen) throw io_error("'" + path + "': truncated header");
    json header;
    try {
        header = json::parse(bytes.substr(12, hlen));
    } catch (const json::exception& e) {
        throw io_error("'" + path + "': bad header JSON: " + e.what());
    }
    const char* payload = bytes.data() + 12 + hlen;
    const size_t payload_len = bytes.size() - 12 - hlen;

    QuantizedModel qm;
    try {
        qm.format_version = header.at("format_version").get<uint32_t>();
        qm.config = config_from_json(header.at("config"));
        for (const auto& tj : header.at("tensors")) {
            const auto name = tj.at("name").get<std::string>();
            const auto dtype = tj.at("dtype").get<std::string>();
            const auto shape = tj.at("shape");
            const size_t rows = shape.at(0).get<size_t>();
            const size_t cols = shape.at(1).get<size_t>();
            const size_t offset = tj.at("byte_offset").get<size_t>();
            const size_t length = tj.at("byte_length").get<size_t>();
            if (offset + length > payload_len)
                throw io_error("'" + path + "': tensor '" + name + "' exceeds payload");
            const char* at = payload + offset;
            QTensorEntry e;
            if (dtype == "f32") {
                if (length != rows * cols * 4)
                    throw io_error("'" + path + "': tensor '" + name + "' length mismatch");
                e.kind = QTensorEntry::Kind::f32;
                e.f32 = Matrix(rows, cols);
                for (size_t i = 0; i < rows * cols; ++i) {
                    float f;
                    std::memcpy(&f, at + i * 4, 4);
                    e.f32.data[i] = static_cast<double>(f);
                }
                e.dequant = e.f32;
            } else {
                QuantizedTensor qt;
                qt.rows = rows;
                qt.cols = cols;
                qt.bits = dtype == "q2" ? 2 : dtype == "q4" ? 4 : dtype == "q8" ? 8 : 0;
                if (qt.bits == 0)
                    throw io_error("'" + path + "': unknown dtype '" + dtype + "'");
                qt.group_size = tj.at("group_size").get<size_t>();
                const size_t per_byte = 8 / static_cast<size_t>(qt.bits);
                const size_t code_bytes = (qt.n_codes() + per_byte - 1) / per_byte;
                const size_t n_groups = rows * qt.groups_per_row();
                if (length != code_bytes + n_groups * 8)
                    throw io_error("'" + path + "': tensor '" + name + "' length mismatch");
                qt.codes.assign(at, at + code_bytes);
                qt.scales.resize(n_groups);
                qt.zeros.resize(n_groups);
                std::memcpy(qt.scales.data(), at + code_bytes, n_groups * 4);
                std::memcpy(qt.zeros.data(), at + code_bytes + n_groups * 4, n_groups * 4);
                e.kind = QTensorEntry::Kind::quantized;
                e.dequant = dequantize(qt);
                e.qt = std::move(qt);
            }
            qm.entries.emplace(name, std::move(e));
        }
    } catch (const json::exception& e) {
        throw io_error("'" + path + "': bad header field: " + e.what());
    }
    validate_quantized_model(qm);
    return qm;
}

ModelCheckpoint read_checkpoint(const std::string& path) {
    QuantizedModel qm = read_qlab(path);
    for (const auto& [name, e] : qm.entries)
        if (e.kind != QTensorEntry::Kind::f32)
            throw validation_error("'" + path + "' holds quantized tensor '" + name +
                                   "'; a full-precision checkpoint is required here");
    return to_checkpoint(qm);
}

void write_adapters(const std::string& path, const AdapterSet& aset,
                    const std::string& base_hash) {
    std::string payload;
    json tensors = json::array();
    auto put = [&](const std::string& name, const Matrix& m) {
        const size_t offset = payload.size();
        append_f32(payload, matrix_to_f32(m));
        tensors.push_back(json{{"name", name},
                               {"dtype", "f32"},
                               {"shape", json::array({m.rows, m.cols})},
                               {"group_size", 0},
                               {"byte_offset", offset},
                               {"byte_length", payload.size() - offset}});
    };
    std::vector<std::string> targets;
    size_t rank = 0;
    double alpha = 0.0;
    for (const auto& [name, ad] : aset.adapters) {
        put("adapter." + name + ".A", ad.a);
        put("adapter." + name + ".B", ad.b);
        targets.push_back(name);
        rank = ad.rank;
        alpha = ad.alpha;
    }
    json header{{"format_version", 1},
                {"config", config_to_json(aset.config())},
                {"adapters",
                 json{{"targets", targets}, {"r", rank}, {"alpha", alpha},
                      {"base_hash", base_hash}}},
                {"tensors", tensors}};
    const std::string header_str = header.dump();
    std::string out;
    out.append(kMagic, sizeof(kMagic));
    const auto hlen = static_cast<uint32_t>(header_str.size());
    char lenbuf[4] = {static_cast<char>(hlen & 0xff), static_cast<char>((hlen >> 8) & 0xff),
                      static_cast<char>((hlen >> 16) & 0xff),
                      static_cast<char>((hlen >> 24) & 0xff)};
    out.append(lenbuf, 4);
    out += header_str;
    out += payload;
    write_file_bytes(path, out);
}

AdapterFile read_adapters(const std::string& path) {
    const std::string bytes = read_file_bytes(path);
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
        throw io_error("'" + path + "' is not a QLAB1 file");
    uint32_t hlen = 0;
    for (int i = 3; i >= 0; --i)
        hlen = (hlen << 8) | static_cast<unsigned char>(bytes[8 + i]);
    if (bytes.size() < 12ull + hlen) throw io_error("'" + path + "': truncated header");
    AdapterFile file;
    try {
        const json header = json::parse(bytes.substr(12, hlen));
        file.config = config_from_json(header.at("config"));
        const json& a = header.at("adapters");
        file.targets = a.at("targets").get<std::vector<std::string>>();
        file.rank = a.at("r").get<size_t>();
        file.alpha = a.at("alpha").get<double>();
        file.base_hash = a.at("base_hash").get<std::string>();
        const char* payload = bytes.data() + 12 + hlen;
        const size_t payload_len = bytes.size() - 12 - hlen;
        std::map<std::string, Matrix> raw;
        for (const auto& tj : header.at("tensors")) {
            const auto name = tj.at("name").get<std::string>();
            const size_t rows = tj.at("shape").at(0).get<size_t>();
            const size_t cols = tj.at("shape").at(1).get<size_t>();
            const size_t offset = tj.at("byte_offset").get<size_t>();
            const size_t length = tj.at("byte_length").get<size_t>();
            if (offset + length > payload_len || length != rows * cols * 4)
                throw io_error("'" + path + "': tensor '" + name + "' length mismatch");
            Matrix m(rows, cols);
            for (size_t i = 0; i < rows * cols; ++i) {
                float f;
                std::memcpy(&f, payload + offset + i * 4, 4);
                m.data[i] = static_cast<double>(f);
            }
            raw.emplace(name, std::move(m));
        }
        for (const auto& target : file.targets) {
            auto ai = raw.find("adapter." + target + ".A");
            auto bi = raw.find("adapter." + target + ".B");
            if (ai == raw.end() || bi == raw.end())
                throw io_error("'" + path + "': missing factors for '" + target + "'");
            file.factors.emplace(target,
                                 std::make_pair(std::move(ai->second), std::move(bi->second)));
        }
    } catch (const json::exception& e) {
        throw io_error("'" + path + "': bad adapter header: " + e.what());
    }
    return file;
}

namespace {

void fill_adapters(AdapterSet& aset, const AdapterFile& file, const std::string& base_file) {
    const std::string actual = file_hash(base_file);
    if (actual != file.base_hash)
        throw validation_error("adapter file was trained against base hash " + file.base_hash +
                               " but '" + base_file + "' hashes to " + actual);
    aset.adapters.clear();
    for (const auto& target : file.targets) {
        const auto& [a, b] = file.factors.at(target);
        const auto [d_out, d_in] = tensor_shape(file.config, target);
        if (a.rows != file.rank || a.cols != d_in || b.rows != d_out || b.cols != file.rank)
            throw validation_error("adapter factors for '" + target + "' have wrong shape");
        LoraAdapter ad;
        ad.target = target;
        ad.rank = file.rank;
        ad.alpha = file.alpha;
        ad.a = a;
        ad.b = b;
        aset.adapters.emplace(target, std::move(ad));
    }
}

}  // namespace

AdapterSet bind_adapters(const AdapterFile& file, const QuantizedModel& base,
                         const std::string& base_file) {
    if (!(base.config == file.config))
        throw validation_error("adapter file config does not match base model");
    AdapterSet aset;
    aset.mode = AdapterMode::post_quant;
    aset.base_q = &base;
    fill_adapters(aset, file, base_file);
    return aset;
}

AdapterSet bind_adapters(const AdapterFile& file, const ModelCheckpoint& base,
                         const std::string& base_file) {
    if (!(base.config == file.config))
        throw validation_error("adapter file config does not match base model");
    AdapterSet aset;
    aset.mode = AdapterMode::pre_quant;
    aset.base_ckpt = &base;
    fill_adapters(aset, file, base_file);
    return aset;
}

std::string file_hash(const std::string& path) {
    const std::string bytes = read_file_bytes(path);
    const uint64_t h = fnv1a64(bytes.data(), bytes.size());
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open '" + path + "' for reading");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw io_error("read failed for '" + path + "'");
    return bytes;
}

void write_file_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot open '" + path + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw io_error("write failed for '" + path + "'");
}

}  // namespace quantlab
