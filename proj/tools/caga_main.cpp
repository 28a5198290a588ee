#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "caga/config_kv.hpp"
#include "caga/dataio.hpp"
#include "caga/interpret.hpp"
#include "caga/model.hpp"
#include "caga/train.hpp"
#include "selftest.hpp"

namespace fs = std::filesystem;
using namespace caga;

namespace {

// Exit codes: 0 success, 1 check/metric failure, 2 usage error, 3 I/O error.
enum ExitCode { kOk = 0, kCheckFailure = 1, kUsage = 2, kIo = 3 };

enum class Precision { f32, f64 };

Precision read_precision() {
    const char* env = std::getenv("CAGA_PRECISION");
    if (!env || std::string(env).empty() || std::string(env) == "f32") return Precision::f32;
    if (std::string(env) == "f64") return Precision::f64;
    throw ConfigError("CAGA_PRECISION must be 'f32' or 'f64', got '" + std::string(env) + "'");
}

int guarded(const std::function<int()>& fn) {
    try {
        return fn();
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kIo;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kCheckFailure;
    }
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path);
    os << content;
    if (!os) throw IoError("write failed for " + path);
}

void ensure_out_dir(const std::string& out) {
    if (out.empty()) throw ConfigError("--out is required");
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("cannot create output directory " + out);
}

struct DataOpts {
    std::string data;  // "synth" or a class-per-directory tree of PPMs
    int synth_classes = 4;
    int synth_per_class = 100;
};

template <typename T>
Dataset<T> load_data(const DataOpts& d, int input_size, unsigned long long seed) {
    if (d.data.empty()) throw ConfigError("--data is required (directory or 'synth')");
    if (d.data == "synth")
        return synth_dataset<T>(d.synth_classes, d.synth_per_class, input_size, seed);
    return load_image_tree<T>(d.data, input_size);
}

struct ResolvedConfig {
    ModelConfig mc;
    TrainConfig tc;
};

// defaults -> config file -> explicit CLI flags
ResolvedConfig resolve_config(const std::string& config_path, unsigned long long seed,
                              const CLI::App* sub, double lr, int epochs, int batch,
                              bool augment) {
    ResolvedConfig r;
    if (!config_path.empty()) config_from_kv(KvFile::load(config_path), r.mc, r.tc);
    r.tc.seed = seed;
    auto given = [sub](const std::string& name) {
        const CLI::Option* opt = sub->get_option_no_throw(name);
        return opt != nullptr && opt->count() > 0;
    };
    if (given("--lr")) r.tc.lr = lr;
    if (given("--epochs")) r.tc.max_epochs = epochs;
    if (given("--batch")) r.tc.batch_size = batch;
    if (given("--augment")) r.tc.augment = augment;
    r.mc.validate();
    r.tc.validate();
    return r;
}

template <typename T>
void save_model_checkpoint(Model<T>& model, const TrainConfig& tc, const NormStats& stats,
                           const std::string& dir) {
    save_checkpoint(model.registry(), dir);
    config_to_kv(model.config(), tc).save(dir + "/config.txt");
    save_norm_stats(stats, dir + "/norm_stats.txt");
}

template <typename T>
Model<T> load_model_checkpoint(const std::string& dir, TrainConfig& tc_out,
                               NormStats& stats_out) {
    ModelConfig mc;
    config_from_kv(KvFile::load(dir + "/config.txt"), mc, tc_out);
    Model<T> model(mc, tc_out.seed);
    load_checkpoint(model.registry(), dir);
    stats_out = load_norm_stats(dir + "/norm_stats.txt");
    return model;
}

// ---- subcommand runners -----------------------------------------------------

template <typename T>
int run_synth(const DataOpts& d, int size, unsigned long long seed, const std::string& out,
              bool tnsr) {
    ensure_out_dir(out);
    Dataset<T> ds = synth_dataset<T>(d.synth_classes, d.synth_per_class, size, seed);
    save_image_tree(ds, out);
    if (tnsr) export_dataset_tnsr(ds, out);
    std::printf("wrote %zu PPM files (%d classes)%s under %s\n", ds.size(), d.synth_classes,
                tnsr ? " plus TNSR batches" : "", out.c_str());
    return kOk;
}

template <typename T>
int run_train(const ResolvedConfig& rc, const DataOpts& d, const std::string& out) {
    ensure_out_dir(out);
    Dataset<T> ds = load_data<T>(d, rc.mc.input_size, rc.tc.seed);
    ds.validate();
    if (ds.num_classes() != rc.mc.num_classes)
        throw ConfigError("dataset has " + std::to_string(ds.num_classes()) +
                          " classes, config expects " + std::to_string(rc.mc.num_classes));
    write_run_manifest(out + "/manifest.txt", config_to_kv(rc.mc, rc.tc), rc.tc.seed, out,
                       "train");

    // single split: fold 0 of the 10-fold protocol
    const auto folds = kfold_split(ds.size(), 10, rc.tc.seed, ds.labels);
    Model<T> model(rc.mc, rc.tc.seed);
    AugmentPolicy policy;
    TrainOutcome<T> outcome =
        train_model(model, ds, folds[0], rc.tc, 0, rc.tc.augment ? &policy : nullptr);

    save_model_checkpoint(model, rc.tc, outcome.norm_stats, out + "/checkpoint");
    write_text(out + "/metrics.csv", metrics_csv({outcome.test_metrics}));
    const FoldSummary summary = aggregate_folds({outcome.test_metrics});
    write_text(out + "/metrics.txt", metrics_table(summary));
    std::printf("epochs=%d%s train_acc=%.4f test_acc=%.4f\n", outcome.epochs_run,
                outcome.early_stopped ? " (early stop)" : "", outcome.train_accuracy,
                outcome.test_metrics.accuracy);
    std::fputs(metrics_table(summary).c_str(), stdout);
    append_manifest_end(out + "/manifest.txt");
    return kOk;
}

template <typename T>
int run_eval(const std::string& checkpoint, const DataOpts& d, const std::string& out) {
    ensure_out_dir(out);
    TrainConfig tc;
    NormStats stats;
    Model<T> model = load_model_checkpoint<T>(checkpoint, tc, stats);
    Dataset<T> ds = load_data<T>(d, model.config().input_size, tc.seed);
    ds.validate();

    std::vector<Tensor<T>> images;
    for (const auto& img : ds.images) images.push_back(apply_zscore_image(img, stats));
    FocalLossConfig flc{tc.focal_gamma, tc.focal_alpha};
    const auto [loss, metrics] = evaluate_model(model, images, ds.labels, flc, tc.batch_size);
    const FoldSummary summary = aggregate_folds({metrics});
    write_text(out + "/metrics.csv", metrics_csv({metrics}));
    write_text(out + "/metrics.txt", metrics_table(summary));
    std::printf("samples=%zu loss=%.6f\n", ds.size(), loss);
    std::fputs(metrics_table(summary).c_str(), stdout);
    return kOk;
}

template <typename T>
int run_cv(const ResolvedConfig& rc, const DataOpts& d, int folds_k, int limit_folds, int jobs,
           const std::string& out, bool save_checkpoints) {
    ensure_out_dir(out);
    Dataset<T> ds = load_data<T>(d, rc.mc.input_size, rc.tc.seed);
    ds.validate();
    if (ds.num_classes() != rc.mc.num_classes)
        throw ConfigError("dataset has " + std::to_string(ds.num_classes()) +
                          " classes, config expects " + std::to_string(rc.mc.num_classes));
    write_run_manifest(out + "/manifest.txt", config_to_kv(rc.mc, rc.tc), rc.tc.seed, out,
                       "cv");
    AugmentPolicy policy;
    const AugmentPolicy* aug = rc.tc.augment ? &policy : nullptr;
    auto per_fold = [&](int f, Model<T>& model, const TrainOutcome<T>& outcome) {
        std::printf("fold %d: epochs=%d%s train_acc=%.4f test_acc=%.4f\n", f,
                    outcome.epochs_run, outcome.early_stopped ? " (early stop)" : "",
                    outcome.train_accuracy, outcome.test_metrics.accuracy);
        if (save_checkpoints)
            save_model_checkpoint(model, rc.tc, outcome.norm_stats,
                                  out + "/fold_" + std::to_string(f));
    };
    CvResult<T> cv = run_cross_validation<T>(rc.mc, rc.tc, ds, folds_k, limit_folds, jobs, aug,
                                             per_fold);
    std::vector<MetricsReport> reports;
    for (const auto& o : cv.outcomes) reports.push_back(o.test_metrics);
    write_text(out + "/folds.csv", metrics_csv(reports));
    write_text(out + "/summary.csv", summary_csv(cv.summary));
    write_text(out + "/summary.txt", metrics_table(cv.summary));
    std::fputs(metrics_table(cv.summary).c_str(), stdout);
    append_manifest_end(out + "/manifest.txt");
    return kOk;
}

template <typename T>
int run_ablate(const ResolvedConfig& rc, const DataOpts& d, int folds_k, int limit_folds,
               int jobs, const std::string& out) {
    ensure_out_dir(out);
    Dataset<T> ds = load_data<T>(d, rc.mc.input_size, rc.tc.seed);
    ds.validate();
    write_run_manifest(out + "/manifest.txt", config_to_kv(rc.mc, rc.tc), rc.tc.seed, out,
                       "ablate");
    auto rows = run_ablation<T>(rc.mc, rc.tc, ds, folds_k, limit_folds, jobs);
    write_text(out + "/ablation.csv", ablation_csv(rows));
    std::printf("cascade_caa caa cga params mean_accuracy\n");
    for (const auto& r : rows)
        std::printf("%11s %3s %3s %6lld %.4f\n", r.cascade_caa ? "yes" : "no", "yes",
                    r.cga ? "yes" : "no", r.params, r.mean_accuracy);
    append_manifest_end(out + "/manifest.txt");
    return kOk;
}

template <typename T>
int run_gradcam(const std::string& checkpoint, const std::string& image_path, int target_class,
                const std::string& layer, const std::string& out) {
    ensure_out_dir(out);
    TrainConfig tc;
    NormStats stats;
    Model<T> model = load_model_checkpoint<T>(checkpoint, tc, stats);
    const int size = model.config().input_size;

    Tensor<T> raw = raw_to_tensor<T>(read_ppm(image_path));
    if (static_cast<int>(raw.extent(1)) != size || static_cast<int>(raw.extent(2)) != size)
        raw = interpolate_bilinear(raw, static_cast<std::size_t>(size),
                                   static_cast<std::size_t>(size));
    Tensor<T> norm = apply_zscore_image(raw, stats);

    const std::vector<int> pred =
        Model<T>::predict(model.forward(reshape(norm, {1, 3, norm.extent(1), norm.extent(2)})));
    const int target = target_class >= 0 ? target_class : pred[0];
    GradCamResult<T> cam = grad_cam(model, norm, target, layer);

    write_pgm(out + "/heatmap.pgm", heatmap_to_pgm(cam.heatmap));
    write_ppm(out + "/overlay.ppm", heatmap_overlay(raw, cam.heatmap));
    std::printf("predicted=%d target=%d layer=%s -> heatmap.pgm, overlay.ppm under %s\n",
                pred[0], target, cam.layer.c_str(), out.c_str());
    return kOk;
}

template <typename T>
int run_profile(const ResolvedConfig& rc, const std::string& out, bool as_flops) {
    ensure_out_dir(out);
    Model<T> model(rc.mc, rc.tc.seed);
    const ProfileReport rep = profile_model(model);
    write_text(out + "/profile.csv", profile_csv(rep, as_flops));

    const ProfileReport exact = count_params(model);
    std::printf("model parameters: %lld (registry: %lld)\n", rep.total_params(),
                exact.total_params());
    std::printf("model %s per image: %lld\n", as_flops ? "FLOPs" : "MACs",
                rep.total_macs() * (as_flops ? 2 : 1));

    // the CAGA block vs a dense k x k stage over the same channel plan
    const long long block = caga_param_count(rc.mc.caga, rc.mc.stem_out_channels());
    const long long cin = rc.mc.stem_out_channels();
    const long long cout = rc.mc.caga.channels();
    const long long k = rc.mc.caga.caa.kernel;
    const long long dense = cout * cin * k * k + cout;
    std::printf("caga block params: %lld; dense %lldx%lld conv stage: %lld\n", block, k, k,
                dense);
    std::printf("reduction vs dense stage (1 - new/old): %.17g\n",
                param_reduction(dense, block));
    std::printf("model total with CAGA minus without (channel adapter): %lld\n", block);
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cascaded atrous group attention: training, evaluation, interpretation and "
                 "profiling on a self-contained tensor stack"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kVersion));

    unsigned long long seed = kDefaultSeed;
    app.add_option("--seed", seed, "global RNG seed")->capture_default_str();
    // let `caga <cmd> --seed N` reach the global option
    app.fallthrough();

    // shared option storage; each subcommand binds the subset it uses
    std::string config_path, out, data, checkpoint, image_path, layer = "caga.0";
    DataOpts dopts;
    double lr = 0;
    int epochs = 0, batch = 0, folds_k = 10, limit_folds = 0, jobs = 1;
    int synth_size = 32, target_class = -1;
    bool augment = false, as_flops = false, synth_tnsr = false;
    std::string inject_fault;

    auto add_data_opts = [&](CLI::App* sub) {
        sub->add_option("--data", data, "dataset directory or 'synth'")->required();
        sub->add_option("--synth-classes", dopts.synth_classes, "classes for --data synth");
        sub->add_option("--synth-per-class", dopts.synth_per_class,
                        "samples per class for --data synth");
    };
    auto add_train_opts = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "key=value config file");
        sub->add_option("--lr", lr, "learning rate override");
        sub->add_option("--epochs", epochs, "max epochs override");
        sub->add_option("--batch", batch, "batch size override");
        sub->add_flag("--augment", augment, "enable runtime augmentation");
        sub->add_option("--out", out, "output directory")->required();
    };

    CLI::App* selftest = app.add_subcommand("selftest", "run gradient, oracle and shape checks");
    selftest->add_option("--inject-fault", inject_fault,
                         "corrupt the named op's gradient check (test fixture)");

    CLI::App* synth = app.add_subcommand("synth", "emit a synthetic PPM dataset tree");
    synth->add_option("--classes", dopts.synth_classes, "number of classes")
        ->capture_default_str();
    synth->add_option("--per-class", dopts.synth_per_class, "samples per class")
        ->capture_default_str();
    synth->add_option("--size", synth_size, "image side length")->capture_default_str();
    synth->add_flag("--tnsr", synth_tnsr, "also export images.tnsr/labels.tnsr batches");
    synth->add_option("--out", out, "output directory")->required();

    CLI::App* train = app.add_subcommand("train", "train one model on a single split");
    add_data_opts(train);
    add_train_opts(train);

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    eval->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
    add_data_opts(eval);
    eval->add_option("--out", out, "output directory")->required();

    CLI::App* cv = app.add_subcommand("cv", "k-fold cross-validation");
    add_data_opts(cv);
    add_train_opts(cv);
    cv->add_option("--folds", folds_k, "number of folds (k >= 2)")->capture_default_str();
    cv->add_option("--limit-folds", limit_folds, "run only the first N folds (0 = all)");
    cv->add_option("--jobs", jobs, "parallel fold workers")->capture_default_str();

    CLI::App* ablate = app.add_subcommand("ablate", "cascade/CGA toggle grid");
    add_data_opts(ablate);
    add_train_opts(ablate);
    ablate->add_option("--folds", folds_k, "number of folds")->capture_default_str();
    ablate->add_option("--limit-folds", limit_folds, "run only the first N folds (0 = all)");
    ablate->add_option("--jobs", jobs, "parallel fold workers")->capture_default_str();

    CLI::App* gradcam = app.add_subcommand("gradcam", "emit Grad-CAM heatmap and overlay");
    gradcam->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
    gradcam->add_option("--image", image_path, "input PPM image")->required();
    gradcam->add_option("--class", target_class, "target class (default: predicted)");
    gradcam->add_option("--layer", layer, "feature tap")->capture_default_str();
    gradcam->add_option("--out", out, "output directory")->required();

    CLI::App* profile = app.add_subcommand("profile", "parameter and MAC accounting");
    profile->add_option("--config", config_path, "key=value config file");
    profile->add_flag("--flops", as_flops, "report 2 FLOPs per MAC");
    profile->add_option("--out", out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kUsage;
    }

    return guarded([&]() -> int {
        const Precision prec = read_precision();
        dopts.data = data;

        if (selftest->parsed()) {
            const int failures = caga::selftest::run_all(inject_fault);
            return failures == 0 ? kOk : kCheckFailure;
        }
        if (synth->parsed()) {
            return prec == Precision::f32
                       ? run_synth<float>(dopts, synth_size, seed, out, synth_tnsr)
                       : run_synth<double>(dopts, synth_size, seed, out, synth_tnsr);
        }
        if (train->parsed()) {
            ResolvedConfig rc = resolve_config(config_path, seed, train, lr, epochs, batch,
                                               augment);
            return prec == Precision::f32 ? run_train<float>(rc, dopts, out)
                                          : run_train<double>(rc, dopts, out);
        }
        if (eval->parsed()) {
            return prec == Precision::f32 ? run_eval<float>(checkpoint, dopts, out)
                                          : run_eval<double>(checkpoint, dopts, out);
        }
        if (cv->parsed()) {
            if (folds_k < 2) throw ConfigError("--folds must be at least 2");
            ResolvedConfig rc = resolve_config(config_path, seed, cv, lr, epochs, batch,
                                               augment);
            return prec == Precision::f32
                       ? run_cv<float>(rc, dopts, folds_k, limit_folds, jobs, out, true)
                       : run_cv<double>(rc, dopts, folds_k, limit_folds, jobs, out, true);
        }
        if (ablate->parsed()) {
            if (folds_k < 2) throw ConfigError("--folds must be at least 2");
            ResolvedConfig rc = resolve_config(config_path, seed, ablate, lr, epochs, batch,
                                               augment);
            return prec == Precision::f32
                       ? run_ablate<float>(rc, dopts, folds_k, limit_folds, jobs, out)
                       : run_ablate<double>(rc, dopts, folds_k, limit_folds, jobs, out);
        }
        if (gradcam->parsed()) {
            return prec == Precision::f32
                       ? run_gradcam<float>(checkpoint, image_path, target_class, layer, out)
                       : run_gradcam<double>(checkpoint, image_path, target_class, layer, out);
        }
        if (profile->parsed()) {
            ResolvedConfig rc = resolve_config(config_path, seed, profile, lr, epochs, batch,
                                               augment);
            return prec == Precision::f32 ? run_profile<float>(rc, out, as_flops)
                                          : run_profile<double>(rc, out, as_flops);
        }
        return kUsage;
    });
}
