#pragma once
// Command-line front end: dataset generation, the two training stages,
// evaluation, the efficiency benchmark, gradient checks, and heatmap dumps.
// Exit codes: 0 success, 1 runtime failure (one-line message on stderr),
// 2 usage error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "deop/bench.hpp"
#include "deop/gradcheck.hpp"
#include "deop/pipeline.hpp"

namespace deop {
namespace cli {

inline const char* usage_text() {
    return "usage: deop <command> [--config FILE] [--KEY VALUE ...]\n"
           "\n"
           "commands:\n"
           "  gen-data         render the synthetic dataset (--out DIR, --seed N,\n"
           "                   --train-count N, --val-count N, --noise X, --image-size N)\n"
           "  train-proposals  stage 1: mask proposal network (--data-dir, --out-dir)\n"
           "  train-deop       stage 2: classification stream (--data-dir, --proposals FILE,\n"
           "                   --out-dir, --mode baseline|baseline+|ps|cal|deop)\n"
           "  eval             validation metrics (--data-dir, --proposals FILE, --deop FILE,\n"
           "                   [--report FILE] [--dump DIR --dump-count N])\n"
           "  bench            one-pass vs multi-pass cost (--n-prime 1,5,20 [--data-dir]\n"
           "                   [--proposals FILE] [--out FILE])\n"
           "  gradcheck        finite differences vs tape (--target all|losses|tensor|encoder|\n"
           "                   proposals|assembled_query|assembled_conv)\n"
           "  dump-heatmaps    prediction + anchor heatmap images (--data-dir, --proposals FILE,\n"
           "                   --deop FILE, --out DIR, --count N)\n"
           "\n"
           "Any RunConfig key doubles as a flag (--deop-lr 0.003 ...). --config loads a\n"
           "key=value file; later flags override it. --seed works everywhere.\n";
}

struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& what) : std::runtime_error(what) {}
};

struct Args {
    RunConfig cfg;
    // command-specific paths and knobs
    std::string out;
    std::string proposals_path;
    std::string deop_path;
    std::string report_path;
    std::string dump_dir;
    int dump_count = 4;
    int count = 4;
    std::string target = "all";
    std::string n_prime = "1,5,20";
    std::string spec_name = "default";
    int train_count = -1;
    int val_count = -1;
    double noise = -1.0;
};

inline Args parse_args(const std::vector<std::string>& argv) {
    Args a;
    size_t i = 0;
    auto next_value = [&](const std::string& flag) -> std::string {
        if (i + 1 >= argv.size()) throw UsageError(flag + " expects a value");
        return argv[++i];
    };
    for (; i < argv.size(); ++i) {
        const std::string& arg = argv[i];
        if (arg.rfind("--", 0) != 0) throw UsageError("unexpected argument '" + arg + "'");
        std::string key = arg.substr(2);
        for (char& ch : key)
            if (ch == '-') ch = '_';
        const std::string value = next_value(arg);
        if (key == "config") {
            a.cfg.load_file(value);
        } else if (key == "out") {
            a.out = value;
        } else if (key == "proposals") {
            a.proposals_path = value;
        } else if (key == "deop") {
            a.deop_path = value;
        } else if (key == "report") {
            a.report_path = value;
        } else if (key == "dump") {
            a.dump_dir = value;
        } else if (key == "dump_count") {
            a.dump_count = std::stoi(value);
        } else if (key == "count") {
            a.count = std::stoi(value);
        } else if (key == "target") {
            a.target = value;
        } else if (key == "n_prime") {
            a.n_prime = value;
        } else if (key == "spec") {
            a.spec_name = value;
        } else if (key == "train_count") {
            a.train_count = std::stoi(value);
        } else if (key == "val_count") {
            a.val_count = std::stoi(value);
        } else if (key == "noise") {
            a.noise = std::stod(value);
        } else {
            try {
                a.cfg.set(key, value);
            } catch (const ConfigError& e) {
                throw UsageError(e.what());
            }
        }
    }
    return a;
}

inline Dataset load_data(const RunConfig& cfg) {
    Dataset ds = load(cfg.data_dir);
    verify_split_integrity(ds);
    return ds;
}

inline int cmd_gen_data(const Args& a) {
    if (a.out.empty()) throw UsageError("gen-data: --out DIR is required");
    if (a.spec_name != "default") throw UsageError("gen-data: unknown --spec '" + a.spec_name + "'");
    DatasetSpec spec = DatasetSpec::standard(a.cfg.seed);
    spec.image_size = a.cfg.image_size;
    if (a.train_count >= 0) spec.train_count = a.train_count;
    if (a.val_count >= 0) spec.val_count = a.val_count;
    if (a.noise >= 0.0) spec.noise = a.noise;
    generate(spec, a.out);
    std::cout << "wrote " << spec.train_count << " train + " << spec.val_count << " val images to " << a.out
              << " (seed " << spec.master_seed << ")\n";
    return 0;
}

inline int cmd_train_proposals(Args a) {
    if (!a.out.empty()) a.cfg.out_dir = a.out;
    Dataset ds = load_data(a.cfg);
    DeopModel model(a.cfg, ds.spec.classes);
    std::cout << "seed=" << a.cfg.seed << "\n";
    train_proposals(model, ds, &std::cout);
    std::filesystem::create_directories(a.cfg.out_dir);
    const std::string path = a.cfg.out_dir + "/proposals.ckpt";
    save_proposal_checkpoint(model, path);
    std::cout << "saved " << path << "\n";
    return 0;
}

inline int cmd_train_deop(Args a) {
    if (!a.out.empty()) a.cfg.out_dir = a.out;
    if (a.proposals_path.empty()) throw UsageError("train-deop: --proposals FILE is required");
    Dataset ds = load_data(a.cfg);
    DeopModel model(a.cfg, ds.spec.classes);
    std::cout << "seed=" << a.cfg.seed << " mode=" << run_mode_name(model.mode) << "\n";
    prepare_backbone(model, ds, &std::cout);
    load_proposal_checkpoint(model, a.proposals_path);
    train_deop(model, ds, &std::cout);
    std::filesystem::create_directories(a.cfg.out_dir);
    const std::string path = a.cfg.out_dir + "/deop.ckpt";
    save_deop_checkpoint(model, path);
    std::cout << "saved " << path << "\n";
    return 0;
}

inline int cmd_eval(Args a) {
    if (a.proposals_path.empty() || a.deop_path.empty())
        throw UsageError("eval: --proposals FILE and --deop FILE are required");
    Dataset ds = load_data(a.cfg);
    DeopModel model(a.cfg, ds.spec.classes);
    load_proposal_checkpoint(model, a.proposals_path);
    load_deop_checkpoint(model, a.deop_path);
    if (!a.dump_dir.empty()) std::filesystem::create_directories(a.dump_dir);
    EvalOutcome ev = evaluate(model, ds.val, a.dump_dir, a.dump_count);
    const std::string text = ev.to_text();
    std::cout << text;
    if (!a.report_path.empty()) {
        std::ofstream out(a.report_path, std::ios::binary);
        if (!out) throw IoError(a.report_path + ": cannot write report");
        out << text;
    }
    return 0;
}

inline int cmd_bench(Args a) {
    BenchConfig bc;
    bc.n_primes.clear();
    bc.tau = a.cfg.tau;
    std::istringstream ns(a.n_prime);
    std::string tok;
    while (std::getline(ns, tok, ',')) {
        if (tok.empty()) continue;
        try {
            bc.n_primes.push_back(std::stoi(tok));
        } catch (const std::exception&) {
            throw UsageError("bench: bad --n-prime element '" + tok + "'");
        }
    }
    if (bc.n_primes.empty()) throw UsageError("bench: --n-prime needs at least one value");

    const RunMode mode = parse_run_mode(a.cfg.mode);
    DatasetSpec spec = DatasetSpec::standard(a.cfg.seed);
    std::vector<ClassInfo> classes = spec.classes;
    DeopModel model(a.cfg, classes);
    std::vector<Tensor> images;
    std::vector<MaskSet> proposals;
    {
        NoTapeScope guard;
        std::vector<Sample> samples;
        if (!a.cfg.data_dir.empty() && std::filesystem::exists(a.cfg.data_dir + "/manifest.txt")) {
            Dataset ds = load_data(a.cfg);
            samples = ds.val;
        } else {
            // synthesized on the fly; weights and images only set the timing
            spec.val_count = 20;
            for (int i = 0; i < spec.val_count; ++i) samples.push_back(render_sample(spec, true, i));
        }
        if (!a.proposals_path.empty()) load_proposal_checkpoint(model, a.proposals_path);
        for (const Sample& s : samples) {
            images.push_back(s.image.to_tensor());
            proposals.push_back(model.proposal_net.propose(images.back()));
        }
    }
    (void)mode;
    std::vector<BenchRow> rows =
        timed_compare(images, proposals, model.encoder, model.calcfg, model.cal_query, model.plain,
                      model.table.effective(), bc);
    const std::string csv = bench_csv(rows);
    std::cout << csv;
    if (!a.out.empty()) {
        std::ofstream out(a.out, std::ios::binary);
        if (!out) throw IoError(a.out + ": cannot write CSV");
        out << csv;
    }
    return 0;
}

inline int cmd_gradcheck(const Args& a) {
    std::map<std::string, double> results;
    if (a.target == "all") {
        results = gradcheck_all();
    } else if (a.target == "losses") {
        results["losses"] = gradcheck_losses();
    } else if (a.target == "tensor") {
        results["tensor"] = gradcheck_tensor();
    } else if (a.target == "encoder") {
        results["encoder"] = gradcheck_encoder();
    } else if (a.target == "proposals") {
        results["proposals"] = gradcheck_proposals();
    } else if (a.target == "assembled_query") {
        results["assembled_query"] = gradcheck_assembled(true);
    } else if (a.target == "assembled_conv") {
        results["assembled_conv"] = gradcheck_assembled(false);
    } else {
        throw UsageError("gradcheck: unknown --target '" + a.target + "'");
    }
    bool ok = true;
    std::cout.precision(17);
    for (const auto& [name, err] : results) {
        std::cout << name << " max_rel_err=" << err << "\n";
        ok = ok && err < 1e-4;
    }
    if (!ok) {
        std::cerr << "error: gradcheck: a module exceeded max relative error 1e-4\n";
        return 1;
    }
    return 0;
}

inline int cmd_dump_heatmaps(Args a) {
    if (a.proposals_path.empty() || a.deop_path.empty())
        throw UsageError("dump-heatmaps: --proposals FILE and --deop FILE are required");
    if (a.out.empty()) throw UsageError("dump-heatmaps: --out DIR is required");
    Dataset ds = load_data(a.cfg);
    DeopModel model(a.cfg, ds.spec.classes);
    load_proposal_checkpoint(model, a.proposals_path);
    load_deop_checkpoint(model, a.deop_path);
    std::filesystem::create_directories(a.out);
    std::vector<Sample> subset(ds.val.begin(),
                               ds.val.begin() + std::min<size_t>(ds.val.size(), static_cast<size_t>(a.count)));
    evaluate(model, subset, a.out, a.count);
    std::cout << "wrote prediction and heatmap images for " << subset.size() << " samples to " << a.out << "\n";
    return 0;
}

inline int dispatch(const std::string& command, const Args& a) {
    if (command == "gen-data") return cmd_gen_data(a);
    if (command == "train-proposals") return cmd_train_proposals(a);
    if (command == "train-deop") return cmd_train_deop(a);
    if (command == "eval") return cmd_eval(a);
    if (command == "bench") return cmd_bench(a);
    if (command == "gradcheck") return cmd_gradcheck(a);
    if (command == "dump-heatmaps") return cmd_dump_heatmaps(a);
    throw UsageError("unknown command '" + command + "'");
}

}  // namespace cli

inline int cli_main(int argc, char** argv) {
    using cli::UsageError;
    if (argc < 2) {
        std::cerr << cli::usage_text();
        return 2;
    }
    const std::string command = argv[1];
    if (command == "--help" || command == "-h" || command == "help") {
        std::cout << cli::usage_text();
        return 0;
    }
    try {
        std::vector<std::string> rest(argv + 2, argv + argc);
        cli::Args args = cli::parse_args(rest);
        return cli::dispatch(command, args);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << cli::usage_text();
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace deop
