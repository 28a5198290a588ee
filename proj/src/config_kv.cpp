#include "caga/config_kv.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>

#include "caga/common.hpp"

namespace caga {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

} // namespace

KvFile KvFile::parse(const std::string& text) {
    KvFile kv;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + " has no '=': " + t);
        kv.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return kv;
}

KvFile KvFile::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("config: cannot open " + path);
    std::ostringstream os;
    os << is.rdbuf();
    return parse(os.str());
}

void KvFile::save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("config: cannot write " + path);
    os << str();
    if (!os) throw IoError("config: write failed for " + path);
}

std::string KvFile::str() const {
    std::string out;
    for (const auto& [k, v] : entries) out += k + "=" + v + "\n";
    return out;
}

const std::string* KvFile::find(const std::string& key) const {
    const std::string* hit = nullptr;
    for (const auto& [k, v] : entries)
        if (k == key) hit = &v;
    return hit;
}

void KvFile::set(const std::string& key, const std::string& value) {
    for (auto& [k, v] : entries)
        if (k == key) {
            v = value;
            return;
        }
    entries.emplace_back(key, value);
}

std::string KvFile::get_string(const std::string& key, const std::string& def) const {
    const std::string* v = find(key);
    return v ? *v : def;
}

int KvFile::get_int(const std::string& key, int def) const {
    const std::string* v = find(key);
    if (!v) return def;
    try {
        return std::stoi(*v);
    } catch (...) {
        throw ConfigError("config: key '" + key + "' is not an integer: " + *v);
    }
}

double KvFile::get_double(const std::string& key, double def) const {
    const std::string* v = find(key);
    if (!v) return def;
    try {
        return std::stod(*v);
    } catch (...) {
        throw ConfigError("config: key '" + key + "' is not a number: " + *v);
    }
}

bool KvFile::get_bool(const std::string& key, bool def) const {
    const std::string* v = find(key);
    if (!v) return def;
    if (*v == "true" || *v == "1") return true;
    if (*v == "false" || *v == "0") return false;
    throw ConfigError("config: key '" + key + "' is not a boolean: " + *v);
}

std::vector<int> KvFile::get_int_list(const std::string& key, std::vector<int> def) const {
    const std::string* v = find(key);
    if (!v) return def;
    std::vector<int> out;
    std::istringstream is(*v);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        try {
            out.push_back(std::stoi(trim(tok)));
        } catch (...) {
            throw ConfigError("config: key '" + key + "' has a bad list entry: " + tok);
        }
    }
    if (out.empty()) throw ConfigError("config: key '" + key + "' is an empty list");
    return out;
}

std::vector<double> KvFile::get_double_list(const std::string& key,
                                            std::vector<double> def) const {
    const std::string* v = find(key);
    if (!v) return def;
    std::vector<double> out;
    std::istringstream is(*v);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        try {
            out.push_back(std::stod(trim(tok)));
        } catch (...) {
            throw ConfigError("config: key '" + key + "' has a bad list entry: " + tok);
        }
    }
    return out;
}

std::string join_ints(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i)
        s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

std::string join_doubles(const std::vector<double>& v) {
    std::string s;
    char buf[64];
    for (std::size_t i = 0; i < v.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.17g", v[i]);
        s += (i ? "," : "") + std::string(buf);
    }
    return s;
}

KvFile config_to_kv(const ModelConfig& mc, const TrainConfig& tc) {
    KvFile kv;
    char buf[64];
    auto setd = [&](const std::string& k, double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        kv.set(k, buf);
    };
    kv.set("num_heads", std::to_string(mc.caga.num_heads));
    kv.set("head_dim", std::to_string(mc.caga.caa.head_dim));
    kv.set("d_qkv", std::to_string(mc.caga.caa.d_qkv));
    kv.set("dilations", join_ints(mc.caga.caa.dilations));
    kv.set("kernel", std::to_string(mc.caga.caa.kernel));
    kv.set("stride", std::to_string(mc.caga.caa.stride));
    kv.set("cascade_dilations", mc.caga.caa.cascade_dilations ? "true" : "false");
    kv.set("cascade_heads", mc.caga.cascade_heads ? "true" : "false");
    kv.set("input_size", std::to_string(mc.input_size));
    kv.set("stem_channels", join_ints(mc.stem_channels));
    kv.set("num_classes", std::to_string(mc.num_classes));
    kv.set("num_caga_blocks", std::to_string(mc.num_caga_blocks));
    kv.set("use_caga", mc.use_caga ? "true" : "false");
    setd("lr", tc.lr);
    setd("lr_gamma", tc.lr_gamma);
    setd("weight_decay", tc.weight_decay);
    kv.set("batch_size", std::to_string(tc.batch_size));
    kv.set("max_epochs", std::to_string(tc.max_epochs));
    kv.set("patience", std::to_string(tc.patience));
    kv.set("seed", std::to_string(tc.seed));
    setd("focal_gamma", tc.focal_gamma);
    if (!tc.focal_alpha.empty()) kv.set("focal_alpha", join_doubles(tc.focal_alpha));
    kv.set("augment", tc.augment ? "true" : "false");
    return kv;
}

void config_from_kv(const KvFile& kv, ModelConfig& mc, TrainConfig& tc) {
    mc.caga.num_heads = kv.get_int("num_heads", mc.caga.num_heads);
    mc.caga.caa.head_dim = kv.get_int("head_dim", mc.caga.caa.head_dim);
    mc.caga.caa.d_qkv = kv.get_int("d_qkv", mc.caga.caa.d_qkv);
    mc.caga.caa.dilations = kv.get_int_list("dilations", mc.caga.caa.dilations);
    mc.caga.caa.kernel = kv.get_int("kernel", mc.caga.caa.kernel);
    mc.caga.caa.stride = kv.get_int("stride", mc.caga.caa.stride);
    mc.caga.caa.cascade_dilations =
        kv.get_bool("cascade_dilations", mc.caga.caa.cascade_dilations);
    mc.caga.cascade_heads = kv.get_bool("cascade_heads", mc.caga.cascade_heads);
    mc.input_size = kv.get_int("input_size", mc.input_size);
    mc.stem_channels = kv.get_int_list("stem_channels", mc.stem_channels);
    mc.num_classes = kv.get_int("num_classes", mc.num_classes);
    mc.num_caga_blocks = kv.get_int("num_caga_blocks", mc.num_caga_blocks);
    mc.use_caga = kv.get_bool("use_caga", mc.use_caga);
    tc.lr = kv.get_double("lr", tc.lr);
    tc.lr_gamma = kv.get_double("lr_gamma", tc.lr_gamma);
    tc.weight_decay = kv.get_double("weight_decay", tc.weight_decay);
    tc.batch_size = kv.get_int("batch_size", tc.batch_size);
    tc.max_epochs = kv.get_int("max_epochs", tc.max_epochs);
    tc.patience = kv.get_int("patience", tc.patience);
    try {
        tc.seed = std::stoull(kv.get_string("seed", std::to_string(tc.seed)));
    } catch (...) {
        throw ConfigError("config: key 'seed' is not an unsigned integer");
    }
    tc.focal_gamma = kv.get_double("focal_gamma", tc.focal_gamma);
    tc.focal_alpha = kv.get_double_list("focal_alpha", tc.focal_alpha);
    tc.augment = kv.get_bool("augment", tc.augment);
}

void write_run_manifest(const std::string& path, const KvFile& resolved_config,
                        unsigned long long seed, const std::string& out_dir,
                        const std::string& command) {
    std::ofstream os(path);
    if (!os) throw IoError("manifest: cannot write " + path);
    os << "version=" << kVersion << "\n";
    os << "command=" << command << "\n";
    os << "seed=" << seed << "\n";
    os << "out_dir=" << out_dir << "\n";
    os << "start_time=" << utc_timestamp() << "\n";
    for (const auto& [k, v] : resolved_config.entries) os << "config." << k << "=" << v << "\n";
    if (!os) throw IoError("manifest: write failed for " + path);
}

void append_manifest_end(const std::string& path) {
    std::ofstream os(path, std::ios::app);
    if (!os) throw IoError("manifest: cannot append to " + path);
    os << "end_time=" << utc_timestamp() << "\n";
}

} // namespace caga
