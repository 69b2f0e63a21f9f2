#include "dqnet/config.hpp"

#include <fstream>
#include <sstream>

namespace dqnet {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

int to_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const int x = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: '" + key + "' expects an integer, got '" + v + "'");
    }
}

double to_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true" || v == "on") return true;
    if (v == "0" || v == "false" || v == "off") return false;
    throw ConfigError("config: '" + key + "' expects a boolean, got '" + v + "'");
}

std::vector<std::string> split(const std::string& v, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, sep)) out.push_back(trim(item));
    return out;
}

void apply_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "image_size") cfg.model.vit.image_size = to_int(key, value);
    else if (key == "patch_size") cfg.model.vit.patch_size = to_int(key, value);
    else if (key == "embed_dim") cfg.model.vit.embed_dim = to_int(key, value);
    else if (key == "depth") cfg.model.vit.depth = to_int(key, value);
    else if (key == "heads") cfg.model.vit.heads = to_int(key, value);
    else if (key == "mlp_ratio") cfg.model.vit.mlp_ratio = to_double(key, value);
    else if (key == "cnn_channels") {
        auto parts = split(value, ',');
        if (parts.size() != 5) throw ConfigError("config: cnn_channels expects 5 comma-separated widths");
        for (int i = 0; i < 5; ++i)
            cfg.model.cnn.channels[static_cast<size_t>(i)] = to_int(key, parts[static_cast<size_t>(i)]);
    } else if (key == "cnn_blocks") cfg.model.cnn.blocks_per_stage = to_int(key, value);
    else if (key == "window") cfg.model.window = to_int(key, value);
    else if (key == "stage_mask") {
        cfg.model.enhance = {false, false, false, false};
        for (char c : value) {
            if (c == ',' || c == ' ') continue;
            if (c < '2' || c > '5') throw ConfigError("config: stage_mask uses stage digits 2..5");
            cfg.model.enhance[static_cast<size_t>(c - '2')] = true;
        }
    } else if (key == "fusion") cfg.model.fusion = fusion_mode_from_name(value);
    else if (key == "decoder_width") cfg.model.decoder_width = to_int(key, value);
    else if (key == "sal_beta") cfg.loss.sal_beta = to_double(key, value);
    else if (key == "weight_lambda") cfg.loss.weight_lambda = to_double(key, value);
    else if (key == "weight_kernel") cfg.loss.weight_kernel = to_int(key, value);
    else if (key == "batch") cfg.train.batch = to_int(key, value);
    else if (key == "max_steps") cfg.train.max_steps = to_int(key, value);
    else if (key == "lr") cfg.train.lr0 = to_double(key, value);
    else if (key == "poly_power") cfg.train.poly_power = to_double(key, value);
    else if (key == "weight_decay") cfg.train.weight_decay = to_double(key, value);
    else if (key == "layer_decay") cfg.train.layer_decay = to_double(key, value);
    else if (key == "seed") cfg.train.seed = static_cast<uint64_t>(to_int(key, value));
    else if (key == "checkpoint_every") cfg.train.checkpoint_every = to_int(key, value);
    else if (key == "augment") cfg.train.augment = to_bool(key, value);
    else if (key == "synth_n") cfg.train.synth_n = to_int(key, value);
    else if (key == "synth_delta") cfg.synth.delta = to_double(key, value);
    else if (key == "synth_seed") cfg.synth.seed = static_cast<uint64_t>(to_int(key, value));
    else if (key == "synth_freq_lo") cfg.synth.freq_lo = to_double(key, value);
    else if (key == "synth_freq_hi") cfg.synth.freq_hi = to_double(key, value);
    else if (key == "synth_blobs_min") cfg.synth.blobs_min = to_int(key, value);
    else if (key == "synth_blobs_max") cfg.synth.blobs_max = to_int(key, value);
    else throw ConfigError("config: unknown key '" + key + "'");
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        apply_key(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    cfg.synth.image_size = cfg.model.vit.image_size;
    return cfg;
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read config file '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str());
}

std::string serialize_config(const RunConfig& cfg) {
    std::ostringstream os;
    os.precision(17);
    os << "image_size = " << cfg.model.vit.image_size << "\n";
    os << "patch_size = " << cfg.model.vit.patch_size << "\n";
    os << "embed_dim = " << cfg.model.vit.embed_dim << "\n";
    os << "depth = " << cfg.model.vit.depth << "\n";
    os << "heads = " << cfg.model.vit.heads << "\n";
    os << "mlp_ratio = " << cfg.model.vit.mlp_ratio << "\n";
    os << "cnn_channels = ";
    for (int i = 0; i < 5; ++i) os << (i ? "," : "") << cfg.model.cnn.channels[static_cast<size_t>(i)];
    os << "\n";
    os << "cnn_blocks = " << cfg.model.cnn.blocks_per_stage << "\n";
    os << "window = " << cfg.model.window << "\n";
    os << "stage_mask = ";
    bool first = true;
    for (int i = 0; i < 4; ++i)
        if (cfg.model.enhance[static_cast<size_t>(i)]) {
            os << (first ? "" : ",") << (i + 2);
            first = false;
        }
    os << "\n";
    os << "fusion = " << fusion_mode_name(cfg.model.fusion) << "\n";
    os << "decoder_width = " << cfg.model.decoder_width << "\n";
    os << "sal_beta = " << cfg.loss.sal_beta << "\n";
    os << "weight_lambda = " << cfg.loss.weight_lambda << "\n";
    os << "weight_kernel = " << cfg.loss.weight_kernel << "\n";
    os << "batch = " << cfg.train.batch << "\n";
    os << "max_steps = " << cfg.train.max_steps << "\n";
    os << "lr = " << cfg.train.lr0 << "\n";
    os << "poly_power = " << cfg.train.poly_power << "\n";
    os << "weight_decay = " << cfg.train.weight_decay << "\n";
    os << "layer_decay = " << cfg.train.layer_decay << "\n";
    os << "seed = " << cfg.train.seed << "\n";
    os << "checkpoint_every = " << cfg.train.checkpoint_every << "\n";
    os << "augment = " << (cfg.train.augment ? 1 : 0) << "\n";
    os << "synth_n = " << cfg.train.synth_n << "\n";
    os << "synth_delta = " << cfg.synth.delta << "\n";
    os << "synth_seed = " << cfg.synth.seed << "\n";
    os << "synth_freq_lo = " << cfg.synth.freq_lo << "\n";
    os << "synth_freq_hi = " << cfg.synth.freq_hi << "\n";
    os << "synth_blobs_min = " << cfg.synth.blobs_min << "\n";
    os << "synth_blobs_max = " << cfg.synth.blobs_max << "\n";
    return os.str();
}

std::string model_config_diff(const RunConfig& a, const RunConfig& b) {
    std::ostringstream os;
    auto cmp = [&](const std::string& key, auto va, auto vb) {
        if (va != vb) os << key << ": checkpoint has " << va << ", requested " << vb << "\n";
    };
    cmp("image_size", a.model.vit.image_size, b.model.vit.image_size);
    cmp("patch_size", a.model.vit.patch_size, b.model.vit.patch_size);
    cmp("embed_dim", a.model.vit.embed_dim, b.model.vit.embed_dim);
    cmp("depth", a.model.vit.depth, b.model.vit.depth);
    cmp("heads", a.model.vit.heads, b.model.vit.heads);
    cmp("mlp_ratio", a.model.vit.mlp_ratio, b.model.vit.mlp_ratio);
    for (int i = 0; i < 5; ++i)
        cmp("cnn_channels[" + std::to_string(i) + "]", a.model.cnn.channels[static_cast<size_t>(i)],
            b.model.cnn.channels[static_cast<size_t>(i)]);
    cmp("cnn_blocks", a.model.cnn.blocks_per_stage, b.model.cnn.blocks_per_stage);
    cmp("window", a.model.window, b.model.window);
    for (int i = 0; i < 4; ++i)
        cmp("stage_mask[" + std::to_string(i + 2) + "]",
            static_cast<int>(a.model.enhance[static_cast<size_t>(i)]),
            static_cast<int>(b.model.enhance[static_cast<size_t>(i)]));
    cmp("fusion", std::string(fusion_mode_name(a.model.fusion)),
        std::string(fusion_mode_name(b.model.fusion)));
    cmp("decoder_width", a.model.decoder_width, b.model.decoder_width);
    return os.str();
}

}  // namespace dqnet
