#pragma once

#include <string>
#include <utility>
#include <vector>

#include "caga/model.hpp"
#include "caga/train.hpp"

namespace caga {

// Ordered key=value text file. Lines starting with '#' and blank lines are
// ignored; later duplicates of a key win.
struct KvFile {
    std::vector<std::pair<std::string, std::string>> entries;

    static KvFile parse(const std::string& text);
    static KvFile load(const std::string& path);
    void save(const std::string& path) const;
    std::string str() const;

    const std::string* find(const std::string& key) const;
    void set(const std::string& key, const std::string& value);

    std::string get_string(const std::string& key, const std::string& def) const;
    int get_int(const std::string& key, int def) const;
    double get_double(const std::string& key, double def) const;
    bool get_bool(const std::string& key, bool def) const;
    std::vector<int> get_int_list(const std::string& key, std::vector<int> def) const;
    std::vector<double> get_double_list(const std::string& key, std::vector<double> def) const;
};

std::string join_ints(const std::vector<int>& v);
std::string join_doubles(const std::vector<double>& v);

// Full experiment config <-> key=value snapshot. Keys: num_heads, head_dim,
// d_qkv, dilations, kernel, stride, cascade_dilations, cascade_heads (block);
// input_size, stem_channels, num_classes, num_caga_blocks, use_caga (model);
// lr, lr_gamma, weight_decay, batch_size, max_epochs, patience, seed,
// focal_gamma, focal_alpha, augment (training).
KvFile config_to_kv(const ModelConfig& mc, const TrainConfig& tc);
void config_from_kv(const KvFile& kv, ModelConfig& mc, TrainConfig& tc);

// Run manifest: the resolved config snapshot plus seed, version, output paths
// and the start timestamp, written before training begins. The end timestamp
// is appended on completion; nothing else changes afterward.
void write_run_manifest(const std::string& path, const KvFile& resolved_config,
                        unsigned long long seed, const std::string& out_dir,
                        const std::string& command);
void append_manifest_end(const std::string& path);

} // namespace caga
