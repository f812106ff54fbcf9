#include "qmamba/serialize.hpp"

#include <cctype>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace qmamba {

namespace fs = std::filesystem;

void save_tensor(const Tensor& t, const std::string& path) {
    std::ofstream bin(path, std::ios::binary);
    if (!bin) throw std::runtime_error("cannot write " + path);
    // native little-endian on every supported target
    bin.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(float)));
    bin.close();

    json side;
    side["shape"] = t.shape();
    side["dtype"] = "f32";
    side["order"] = "row-major";
    write_text_file(path + ".json", side.dump(2) + "\n");
}

Tensor load_tensor(const std::string& path) {
    const json side = json::parse(read_text_file(path + ".json"));
    if (side.value("dtype", "") != "f32" || side.value("order", "") != "row-major")
        throw std::runtime_error("unsupported tensor encoding in " + path + ".json");
    std::vector<size_t> shape = side.at("shape").get<std::vector<size_t>>();

    std::ifstream bin(path, std::ios::binary);
    if (!bin) throw std::runtime_error("cannot read " + path);
    size_t n = 1;
    for (size_t d : shape) n *= d;
    std::vector<float> data(n);
    bin.read(reinterpret_cast<char*>(data.data()),
             static_cast<std::streamsize>(n * sizeof(float)));
    if (static_cast<size_t>(bin.gcount()) != n * sizeof(float))
        throw std::runtime_error("truncated tensor blob " + path);
    return Tensor(std::move(shape), std::move(data));
}

json quant_params_to_json(const QuantParams& p) {
    json j;
    j["kind"] = quant_kind_name(p.kind);
    j["bits"] = p.bits;
    j["scales"] = p.scales;
    j["zero_points"] = p.zero_points;
    j["group_length"] = p.group_length;
    j["seq_length"] = p.seq_length;
    return j;
}

QuantParams quant_params_from_json(const json& j) {
    QuantParams p;
    p.kind = quant_kind_from_name(j.at("kind").get<std::string>());
    p.bits = j.at("bits").get<int>();
    p.scales = j.at("scales").get<std::vector<float>>();
    p.zero_points = j.at("zero_points").get<std::vector<int>>();
    p.group_length = j.value("group_length", 0);
    p.seq_length = j.value("seq_length", 0);
    p.validate();
    return p;
}

json assignment_to_json(const QuantizerAssignment& qa) {
    json j;
    j["abar_route"] = route_name(qa.abar_route);
    json slots = json::object();
    for (const auto& [name, slot] : qa.slots) {
        json s;
        s["enabled"] = slot.enabled;
        if (slot.enabled) s["params"] = quant_params_to_json(slot.params);
        slots[name] = s;
    }
    j["slots"] = slots;
    return j;
}

QuantizerAssignment assignment_from_json(const json& j) {
    QuantizerAssignment qa;
    qa.abar_route =
        j.value("abar_route", std::string("uniform")) == "ltsq" ? Route::LtSQ : Route::Uniform;
    for (const auto& [name, s] : j.at("slots").items()) {
        QuantSlot slot;
        slot.enabled = s.value("enabled", false);
        if (slot.enabled) slot.params = quant_params_from_json(s.at("params"));
        qa.slots[name] = std::move(slot);
    }
    return qa;
}

json calib_stats_to_json(const CalibStats& s) {
    json j;
    j["min"] = s.min();
    j["max"] = s.max();
    j["count"] = s.count();
    j["reservoir_size"] = s.reservoir().size();
    j["median"] = s.running_median();
    j["p01"] = s.reservoir_percentile(1.0);
    j["p99"] = s.reservoir_percentile(99.0);
    return j;
}

namespace {

void save_block(const MambaBlockWeights& b, const std::string& dir, int idx, json& manifest) {
    auto put = [&](const std::string& leaf, const Tensor& t) {
        const std::string name = "block" + std::to_string(idx) + "." + leaf;
        const std::string file = name + ".bin";
        save_tensor(t, dir + "/" + file);
        manifest["tensors"][name] = file;
    };
    put("W_in", b.W_in);
    put("W_conv1d", b.W_conv1d);
    put("W_out", b.W_out);
    put("A", b.ssm.A);
    put("D", b.ssm.D_skip);
    put("W_B", b.ssm.W_B);
    put("W_C", b.ssm.W_C);
    put("W_delta", b.ssm.W_delta);
}

Tensor pull(const json& manifest, const std::string& dir, const std::string& name) {
    return load_tensor(dir + "/" + manifest.at("tensors").at(name).get<std::string>());
}

} // namespace

void save_classifier(const MambaClassifier& m, const std::string& dir) {
    fs::create_directories(dir);
    json manifest;
    manifest["format"] = "qmamba-model";
    manifest["num_blocks"] = m.blocks.size();
    manifest["num_classes"] = m.num_classes;
    json dims = json::array();
    for (const auto& b : m.blocks)
        dims.push_back({{"model_dim", b.model_dim},
                        {"inner_dim", b.inner_dim},
                        {"conv_k", b.conv_k},
                        {"dim_n", b.ssm.dim_n}});
    manifest["blocks"] = dims;
    manifest["tensors"] = json::object();
    for (size_t i = 0; i < m.blocks.size(); ++i)
        save_block(m.blocks[i], dir, static_cast<int>(i), manifest);
    save_tensor(m.W_head, dir + "/head.bin");
    manifest["tensors"]["head"] = "head.bin";
    write_text_file(dir + "/manifest.json", manifest.dump(2) + "\n");
}

MambaClassifier load_classifier(const std::string& dir) {
    const json manifest = json::parse(read_text_file(dir + "/manifest.json"));
    MambaClassifier m;
    m.num_classes = manifest.at("num_classes").get<int>();
    const size_t nb = manifest.at("num_blocks").get<size_t>();
    for (size_t i = 0; i < nb; ++i) {
        const json& bd = manifest.at("blocks").at(i);
        MambaBlockWeights b;
        b.model_dim = bd.at("model_dim").get<int>();
        b.inner_dim = bd.at("inner_dim").get<int>();
        b.conv_k = bd.at("conv_k").get<int>();
        b.ssm.dim_d = b.inner_dim;
        b.ssm.dim_n = bd.at("dim_n").get<int>();
        const std::string p = "block" + std::to_string(i) + ".";
        b.W_in = pull(manifest, dir, p + "W_in");
        b.W_conv1d = pull(manifest, dir, p + "W_conv1d");
        b.W_out = pull(manifest, dir, p + "W_out");
        b.ssm.A = pull(manifest, dir, p + "A");
        b.ssm.D_skip = pull(manifest, dir, p + "D");
        b.ssm.W_B = pull(manifest, dir, p + "W_B");
        b.ssm.W_C = pull(manifest, dir, p + "W_C");
        b.ssm.W_delta = pull(manifest, dir, p + "W_delta");
        b.validate();
        m.blocks.push_back(std::move(b));
    }
    m.W_head = pull(manifest, dir, "head");
    return m;
}

void write_text_file(const std::string& path, const std::string& content) {
    if (const auto parent = fs::path(path).parent_path(); !parent.empty())
        fs::create_directories(parent);
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << content;
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

uint64_t fnv1a_hash(const std::string& bytes) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

namespace {

std::string strip(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

json parse_toml_value(const std::string& raw) {
    const std::string v = strip(raw);
    if (v.empty()) throw std::runtime_error("toml: empty value");
    if (v.front() == '"') {
        if (v.size() < 2 || v.back() != '"') throw std::runtime_error("toml: unterminated string");
        return v.substr(1, v.size() - 2);
    }
    if (v == "true") return true;
    if (v == "false") return false;
    if (v.front() == '[') {
        if (v.back() != ']') throw std::runtime_error("toml: unterminated array");
        json arr = json::array();
        std::string body = v.substr(1, v.size() - 2);
        size_t depth = 0, start = 0;
        for (size_t i = 0; i <= body.size(); ++i) {
            if (i == body.size() || (body[i] == ',' && depth == 0)) {
                const std::string item = strip(body.substr(start, i - start));
                if (!item.empty()) arr.push_back(parse_toml_value(item));
                start = i + 1;
            } else if (body[i] == '[') {
                ++depth;
            } else if (body[i] == ']') {
                --depth;
            }
        }
        return arr;
    }
    // number: integer when it parses cleanly as one
    try {
        size_t used = 0;
        if (v.find_first_of(".eE") == std::string::npos) {
            const long long i = std::stoll(v, &used);
            if (used == v.size()) return i;
        }
        const double d = std::stod(v, &used);
        if (used == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw std::runtime_error("toml: cannot parse value '" + v + "'");
}

} // namespace

json parse_toml_lite(const std::string& text) {
    json root = json::object();
    json* table = &root;
    size_t pos = 0;
    while (pos < text.size()) {
        size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        std::string line = text.substr(pos, eol - pos);
        pos = eol + 1;

        // strip comments outside strings
        bool in_str = false;
        for (size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"') in_str = !in_str;
            if (line[i] == '#' && !in_str) {
                line = line.substr(0, i);
                break;
            }
        }
        line = strip(line);
        if (line.empty()) continue;

        if (line.front() == '[') {
            if (line.back() != ']') throw std::runtime_error("toml: bad table header " + line);
            const std::string name = strip(line.substr(1, line.size() - 2));
            table = &root;
            size_t start = 0;
            while (start <= name.size()) {
                size_t dot = name.find('.', start);
                if (dot == std::string::npos) dot = name.size();
                const std::string part = strip(name.substr(start, dot - start));
                if (part.empty()) throw std::runtime_error("toml: bad table name " + name);
                table = &(*table)[part];
                if (!table->is_object()) *table = json::object();
                start = dot + 1;
            }
            continue;
        }

        const size_t eq = line.find('=');
        if (eq == std::string::npos) throw std::runtime_error("toml: expected key = value: " + line);
        const std::string key = strip(line.substr(0, eq));
        if (key.empty()) throw std::runtime_error("toml: empty key");
        (*table)[key] = parse_toml_value(line.substr(eq + 1));
    }
    return root;
}

json load_config_file(const std::string& path) {
    const std::string text = read_text_file(path);
    if (path.size() >= 5 && path.substr(path.size() - 5) == ".toml")
        return parse_toml_lite(text);
    return json::parse(text);
}

} // namespace qmamba
