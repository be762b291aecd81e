// fcvit: command-line front end for the FCViT library.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fcvit/fcvit.hpp"

namespace {

using namespace fcvit;

struct ModelSource {
    std::string preset;
    std::string config;

    void add_to(CLI::App* cmd) {
        auto* p = cmd->add_option("--preset", preset, "Preset name (" + join_names() + ")");
        auto* c = cmd->add_option("--config", config, "JSON model config file");
        p->excludes(c);
    }

    ModelConfig resolve(const std::string& fallback = "") const {
        if (!config.empty()) return load_config(config);
        if (!preset.empty()) return presets::by_name(preset);
        if (!fallback.empty()) return presets::by_name(fallback);
        throw ConfigError("one of --preset or --config is required");
    }

    static std::string join_names() {
        std::string s;
        for (const auto& n : presets::names()) s += (s.empty() ? "" : ", ") + n;
        return s;
    }
};

template <Real T>
Tensor<T> as_batch(const StoredTensor& st) {
    Tensor<T> x = st.as<T>();
    if (x.ndim() == 3) x = x.reshape({1, x.dim(0), x.dim(1), x.dim(2)});
    if (x.ndim() != 4) throw ShapeError("input tensor must be [3,H,W] or [N,3,H,W], got " + shape_str(x.shape()));
    return x;
}

template <Real T>
int run_forward(const std::string& weights, const std::string& input, const std::string& out) {
    auto model = load_weights<T>(weights);
    NoGradGuard ng;
    auto logits = model_forward(model, Var<T>::constant(as_batch<T>(load_tensor(input))));
    save_tensor(logits.value(), out);
    std::cout << nlohmann::json{{"output", out}, {"shape", logits.shape()}}.dump() << "\n";
    return 0;
}

template <Real T>
int run_export(const std::string& weights, const std::string& input, std::size_t block,
               std::optional<std::size_t> rep, const std::string& out) {
    auto model = load_weights<T>(weights);
    auto x = as_batch<T>(load_tensor(input));
    if (x.dim(0) != 1) throw ShapeError("export-sim expects a single image");
    auto ex = export_similarity_maps(model, x, block, rep);
    save_tensor(ex.maps, out);
    nlohmann::json j{{"output", out}, {"shape", ex.maps.shape()}};
    j["head_consistency"] = ex.head_consistency ? nlohmann::json(*ex.head_consistency) : nlohmann::json(nullptr);
    std::cout << j.dump() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"FCViT reference implementation"};
    app.require_subcommand(1);
    app.fallthrough();
    std::uint64_t seed = 0;
    app.add_option("--seed", seed, "Random seed")->envname("FCVIT_SEED");

    // params
    ModelSource params_src;
    auto* params = app.add_subcommand("params", "Print the parameter count of a model");
    params_src.add_to(params);

    // flops
    ModelSource flops_src;
    std::size_t flops_res = 224;
    auto* flops = app.add_subcommand("flops", "Print the multiply-accumulate count of one forward pass");
    flops_src.add_to(flops);
    flops->add_option("--res", flops_res, "Input resolution")->capture_default_str();

    // init
    ModelSource init_src;
    std::string init_out;
    bool init_zero = false, init_f64 = false;
    auto* init = app.add_subcommand("init", "Write freshly initialized weights");
    init_src.add_to(init);
    init->add_option("--out", init_out, "Weight file to write")->required();
    init->add_flag("--zero", init_zero, "Zero every tensor");
    init->add_flag("--f64", init_f64, "Store 64-bit weights");

    // gen-toy
    std::string toy_out, toy_labels;
    std::size_t toy_per_class = 128, toy_classes = 4;
    auto* gen = app.add_subcommand("gen-toy", "Write the synthetic pattern dataset as a tensor file");
    gen->add_option("--out", toy_out, "Image tensor file [N,3,32,32]")->required();
    gen->add_option("--labels", toy_labels, "Label tensor file [N]");
    gen->add_option("--per-class", toy_per_class, "Samples per class")->capture_default_str();
    gen->add_option("--classes", toy_classes, "Number of classes (<= 4)")->capture_default_str();

    // forward
    std::string fwd_weights, fwd_input, fwd_out;
    auto* fwd = app.add_subcommand("forward", "Run a model on an input tensor file and write logits");
    fwd->add_option("--weights", fwd_weights, "Weight file")->required();
    fwd->add_option("--input", fwd_input, "Input tensor file [N,3,H,W] or [3,H,W]")->required();
    fwd->add_option("--out", fwd_out, "Logits tensor file")->required();

    // gradcheck
    ModelSource gc_src;
    std::size_t gc_samples = 50, gc_res = 32;
    double gc_jitter = 0.2, gc_tol = 1e-4;
    auto* gcheck = app.add_subcommand("gradcheck", "Compare model gradients with central differences (f64)");
    gc_src.add_to(gcheck);
    gcheck->add_option("--samples", gc_samples, "Coordinates to compare")->capture_default_str();
    gcheck->add_option("--res", gc_res, "Input resolution")->capture_default_str();
    gcheck->add_option("--jitter", gc_jitter, "Std of Gaussian noise added to the initial parameters")->capture_default_str();
    gcheck->add_option("--tol", gc_tol, "Failure threshold on the max relative error")->capture_default_str();

    // train-toy
    ModelSource tr_src;
    std::size_t tr_steps = 500, tr_batch = 64, tr_per_class = 128;
    double tr_lr = 1e-3, tr_wd = 0.05;
    std::string tr_out;
    auto* train = app.add_subcommand("train-toy", "Train on the synthetic dataset; one JSON line per step");
    tr_src.add_to(train);
    train->add_option("--steps", tr_steps, "Optimizer steps")->capture_default_str();
    train->add_option("--batch", tr_batch, "Batch size")->capture_default_str();
    train->add_option("--lr", tr_lr, "Peak learning rate")->capture_default_str();
    train->add_option("--wd", tr_wd, "Weight decay")->capture_default_str();
    train->add_option("--per-class", tr_per_class, "Samples per class")->capture_default_str();
    train->add_option("--out", tr_out, "Write the trained weights here");

    // analyze
    std::string an_attn;
    auto* analyze = app.add_subcommand("analyze", "Histogram and consistency statistics of an attention tensor");
    analyze->add_option("--attn", an_attn, "Attention tensor file [n,n] or [heads,n,n]")->required();

    // export-sim
    std::string ex_weights, ex_input, ex_out;
    std::size_t ex_block = 0;
    std::optional<std::size_t> ex_rep;
    auto* exsim = app.add_subcommand("export-sim", "Write the per-group similarity maps of one block");
    exsim->add_option("--weights", ex_weights, "Weight file")->required();
    exsim->add_option("--input", ex_input, "Image tensor file [3,H,W] or [1,3,H,W]")->required();
    exsim->add_option("--block", ex_block, "Block index counted across stages")->required();
    exsim->add_option("--rep", ex_rep, "Token-mixer repetition (default: last)");
    exsim->add_option("--out", ex_out, "Similarity tensor file [g,H,W]")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        if (*params) {
            std::cout << count_params(params_src.resolve()) << "\n";
        } else if (*flops) {
            std::cout << count_flops(flops_src.resolve(), flops_res) << "\n";
        } else if (*init) {
            const auto cfg = init_src.resolve();
            auto write = [&](auto model) {
                if (init_zero) {
                    model.visit([](const std::string&, auto& v) { v.mutable_value().fill(0); });
                }
                save_weights(model, init_out);
            };
            if (init_f64) {
                write(build_model<double>(cfg, seed));
            } else {
                write(build_model<float>(cfg, seed));
            }
            std::cout << nlohmann::json{{"output", init_out}, {"config", cfg.name}}.dump() << "\n";
        } else if (*gen) {
            ToyDatasetSpec spec;
            spec.seed = seed;
            spec.classes = toy_classes;
            spec.samples_per_class = toy_per_class;
            auto data = gen_toy_dataset<float>(spec);
            save_tensor(data.images, toy_out);
            if (!toy_labels.empty()) {
                Tensor<float> lab({data.labels.size()});
                for (std::size_t i = 0; i < data.labels.size(); ++i) lab[i] = static_cast<float>(data.labels[i]);
                save_tensor(lab, toy_labels);
            }
            std::cout << nlohmann::json{{"output", toy_out}, {"shape", data.images.shape()}}.dump() << "\n";
        } else if (*fwd) {
            // Runs in the precision the weights were stored in.
            return weight_file_dtype(detail::read_file(fwd_weights)) == DType::f64
                       ? run_forward<double>(fwd_weights, fwd_input, fwd_out)
                       : run_forward<float>(fwd_weights, fwd_input, fwd_out);
        } else if (*gcheck) {
            const auto cfg = gc_src.resolve("micro");
            auto model = build_model<double>(cfg, seed);
            Rng rng(seed + 1);
            model.visit([&](const std::string&, Var<double>& v) {
                for (auto& x : v.mutable_value().data()) x += rng.normal() * gc_jitter;
            });
            auto x = Var<double>::constant(rng.normal_tensor<double>({2, cfg.in_channels, gc_res, gc_res}));
            std::vector<std::size_t> labels{rng.index(cfg.num_classes), rng.index(cfg.num_classes)};
            GradCheckOptions opt;
            opt.samples = gc_samples;
            opt.seed = seed;
            auto r = finite_diff_check(
                [&] { return cross_entropy(model_forward(model, x), std::span<const std::size_t>(labels)); },
                model.parameters(), opt);
            std::cout << nlohmann::json{{"max_rel_error", r.max_rel_error},
                                        {"checked", r.checked},
                                        {"skipped", r.skipped},
                                        {"tolerance", gc_tol}}
                             .dump()
                      << "\n";
            return r.max_rel_error <= gc_tol && r.checked > 0 ? 0 : 3;
        } else if (*train) {
            const auto cfg = tr_src.resolve("micro");
            ToyDatasetSpec spec;
            spec.seed = seed;
            spec.samples_per_class = tr_per_class;
            spec.classes = std::min<std::size_t>(4, cfg.num_classes);
            auto data = gen_toy_dataset<float>(spec);
            auto model = build_model<float>(cfg, seed);
            TrainOptions opt;
            opt.steps = tr_steps;
            opt.batch_size = tr_batch;
            opt.lr = tr_lr;
            opt.weight_decay = tr_wd;
            opt.seed = seed;
            opt.on_step = [](const nlohmann::json& j) { std::cout << j.dump() << "\n" << std::flush; };
            auto r = train_toy(model, data, opt);
            std::cout << nlohmann::json{{"final_loss", r.final_loss}, {"final_accuracy", r.final_accuracy}}.dump()
                      << "\n";
            if (!tr_out.empty()) save_weights(model, tr_out);
        } else if (*analyze) {
            auto st = load_tensor(an_attn);
            auto stats = st.dtype == DType::f64 ? attention_stats(st.f64) : attention_stats(st.f32);
            std::cout << to_json(stats).dump() << "\n";
        } else if (*exsim) {
            return weight_file_dtype(detail::read_file(ex_weights)) == DType::f64
                       ? run_export<double>(ex_weights, ex_input, ex_block, ex_rep, ex_out)
                       : run_export<float>(ex_weights, ex_input, ex_block, ex_rep, ex_out);
        }
    } catch (const fcvit::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
