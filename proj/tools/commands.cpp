#include "commands.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "sinsemi/digest.hpp"
#include "sinsemi/downstream.hpp"
#include "sinsemi/errors.hpp"
#include "sinsemi/perceptual.hpp"
#include "sinsemi/sampler.hpp"
#include "sinsemi/trainer.hpp"

namespace fs = std::filesystem;

namespace sinsemi::cli {

namespace {

constexpr std::uint64_t kInitStream = 0x696e6974;  // model init seed = derive_seed(seed, {kInitStream})

void require(const std::string& value, const char* flag, const char* command) {
    if (value.empty()) throw ConfigError(std::string(command) + " needs --" + flag);
}

fs::path ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory '" + dir + "'");
    return fs::path(dir);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw IoError("cannot write '" + path.string() + "'");
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fmt6(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

std::string index_name(const char* prefix, int i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%04d", prefix, i);
    return buf;
}

bool is_mask_file(const fs::path& p) { return p.filename().string().ends_with(".mask.png"); }

/// Sorted image PNGs in a directory, mask files excluded.
std::vector<fs::path> list_images(const std::string& dir) {
    if (!fs::is_directory(dir)) throw IoError("'" + dir + "' is not a directory");
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".png" && !is_mask_file(e.path())) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    if (out.empty()) throw IoError("no PNG images in '" + dir + "'");
    return out;
}

fs::path mask_path(const fs::path& image) {
    return image.parent_path() / (image.stem().string() + ".mask.png");
}

std::vector<LabeledImage> load_labeled(const std::string& dir) {
    std::vector<LabeledImage> out;
    for (const auto& p : list_images(dir)) {
        LabeledImage li{load_image(p.string()), load_mask(mask_path(p).string())};
        if (li.mask.height != li.image.height || li.mask.width != li.image.width) {
            throw IoError("mask dims differ from image for '" + p.string() + "'");
        }
        out.push_back(std::move(li));
    }
    return out;
}

FeatureExtractor make_extractor(const RunConfig& cfg, int channels) {
    if (cfg.extractor == "procedural") return FeatureExtractor::procedural(channels, cfg.extractor_seed);
    FeatureExtractor fx = FeatureExtractor::load(cfg.extractor);
    if (fx.in_channels() != channels) throw ConfigError("feature extractor channel count does not match the images");
    return fx;
}

std::string pyramid_sizes(const Pyramid& p) {
    std::string s;
    for (const auto& l : p.levels) {
        if (!s.empty()) s += ",";
        s += std::to_string(l.height) + "x" + std::to_string(l.width);
    }
    return s;
}

std::string manifest_value(const Checkpoint& ck, const std::string& key) {
    for (const auto& [k, v] : ck.manifest)
        if (k == key) return v;
    return "";
}

struct TrainingData {
    Image image;
    PairSource src;
};

TrainingData training_data(const RunConfig& cfg) {
    Image img = load_image(cfg.image);
    PairSource src(build_pyramid(img, cfg.scale_factor, cfg.min_side));
    return {std::move(img), std::move(src)};
}

/// Loads a checkpoint and checks it was trained on this pyramid geometry.
Checkpoint load_matching(const std::string& path, const PairSource& src) {
    Checkpoint ck = load_checkpoint(path);
    const std::string stored = manifest_value(ck, "pyramid");
    const std::string here = pyramid_sizes(src.pyramid());
    if (!stored.empty() && stored != here) {
        throw ConfigError("geometry mismatch: checkpoint '" + path + "' was trained on pyramid " + stored +
                          ", current image/pyramid settings give " + here);
    }
    if (ck.model.config().in_channels != src.x0(0).channels) {
        throw ConfigError("geometry mismatch: checkpoint channel count differs from the image");
    }
    if (ck.model.config().num_scales < src.levels()) {
        throw ConfigError("geometry mismatch: checkpoint has fewer scale embeddings than pyramid levels");
    }
    return ck;
}

void save_labeled(const LabeledImage& li, const fs::path& dir, const std::string& stem) {
    save_image(li.image, (dir / (stem + ".png")).string());
    save_mask(li.mask, (dir / (stem + ".mask.png")).string());
}

}  // namespace

void cmd_fixture(const RunConfig& cfg) {
    const FixtureSpec spec = cfg.fixture();
    const Augment aug = parse_augment(cfg.augment);
    if (cfg.count < 1) throw ConfigError("fixture: --count must be >= 1");
    const fs::path dir = ensure_dir(cfg.out);
    std::vector<std::string> notes;
    if (cfg.count == 1 && !aug.noise && !aug.flip) {
        save_labeled(make_fixture(spec), dir, "fixture");
        notes.push_back("wrote fixture.png fixture.mask.png");
    } else {
        std::vector<LabeledImage> items;
        if (cfg.vary) {
            for (int i = 0; i < cfg.count; ++i) {
                FixtureSpec s = spec;
                s.seed = spec.seed + static_cast<std::uint64_t>(i);
                items.push_back(make_test_set(s, 1, aug).front());
            }
        } else {
            items = make_test_set(spec, cfg.count, aug);
        }
        for (int i = 0; i < cfg.count; ++i) save_labeled(items[i], dir, index_name("fixture", i));
        notes.push_back("wrote " + std::to_string(cfg.count) + " image/mask pairs");
    }
    write_text(dir / "manifest.txt", manifest_text("fixture", cfg, {}, notes));
    std::cout << "fixture: wrote " << cfg.count << " item(s) to " << dir.string() << "\n";
}

void cmd_train(const RunConfig& cfg) {
    require(cfg.image, "image", "train");
    const BridgeConfig bridge = cfg.bridge();
    const TrainConfig tcfg = cfg.train();
    ModelConfig mcfg = cfg.model();
    TrainingData data = training_data(cfg);
    mcfg.in_channels = data.image.channels;
    if (data.src.levels() > mcfg.num_scales) {
        throw ConfigError("pyramid has " + std::to_string(data.src.levels()) + " levels, raise --num-scales");
    }
    const fs::path dir = ensure_dir(cfg.out);
    std::vector<std::pair<std::string, std::string>> digests{{"image", file_digest(cfg.image)}};

    TrainState state = [&] {
        if (cfg.resume.empty()) return make_train_state(mcfg, tcfg, derive_seed(cfg.seed, {kInitStream}));
        digests.emplace_back("resume", file_digest(cfg.resume));
        Checkpoint ck = load_matching(cfg.resume, data.src);
        if (!(ck.model.config() == mcfg)) {
            throw ConfigError("geometry mismatch: --resume checkpoint model config differs from the requested one");
        }
        return TrainState{std::move(ck.model), std::move(ck.optimizer), ck.step};
    }();
    const long start = state.step;

    const std::vector<std::pair<std::string, std::string>> extra{
        {"seed", std::to_string(cfg.seed)},
        {"pyramid", pyramid_sizes(data.src.pyramid())},
        {"image_fnv1a", digests.front().second},
        {"bridge.sigma", fmt(bridge.sigma)},
        {"bridge.eps_reg", fmt(bridge.eps_reg)},
        {"bridge.t_clamp", fmt(bridge.t_clamp)},
        {"bridge.velocity_variant", to_string(bridge.velocity_variant)},
        {"config_hash", config_hash(cfg)},
    };
    const fs::path csv = dir / "loss.csv";
    std::vector<LossRecord> pending;
    bool csv_started = start > 0;  // a resumed run appends to the existing trace
    auto flush = [&] {
        write_loss_csv(pending, csv.string(), csv_started);
        csv_started = true;
        pending.clear();
    };
    TrainHooks hooks;
    hooks.on_log = [&](const LossRecord& r) { pending.push_back(r); };
    hooks.on_checkpoint = [&](const TrainState& s) {
        flush();
        const std::string name = s.step == tcfg.iterations ? "model.ckpt" : "model_" + std::to_string(s.step) + ".ckpt";
        save_checkpoint(s.model, s.optimizer, s.step, (dir / name).string(), extra);
    };
    if (start >= tcfg.iterations) {
        std::cout << "train: checkpoint already at step " << start << " >= --iters " << tcfg.iterations << "\n";
    } else {
        const auto trace = train(state, data.src, bridge, tcfg, hooks);
        std::cout << "train: steps " << start + 1 << ".." << state.step << ", final loss " << trace.back().loss
                  << "\n";
    }
    write_text(dir / "manifest.txt",
               manifest_text("train", cfg, digests,
                             {"pyramid " + pyramid_sizes(data.src.pyramid()),
                              "model init seed " + std::to_string(derive_seed(cfg.seed, {kInitStream})),
                              "resumed from step " + std::to_string(start)}));
}

void cmd_sample(const RunConfig& cfg) {
    require(cfg.checkpoint, "checkpoint", "sample");
    require(cfg.image, "image", "sample");
    if (cfg.count < 1) throw ConfigError("sample: --count must be >= 1");
    const SampleConfig scfg = cfg.sample();
    TrainingData data = training_data(cfg);
    const Checkpoint ck = load_matching(cfg.checkpoint, data.src);
    std::optional<FeatureExtractor> fx;
    std::optional<PerceptualEnergy> energy;
    if (scfg.guidance > 0.0) {
        fx.emplace(make_extractor(cfg, data.image.channels));
        energy.emplace(*fx);
    }
    const fs::path dir = ensure_dir(cfg.out);
    const ModelField field(ck.model);
    const auto images = sample_batch(field, data.src, scfg, energy ? &*energy : nullptr, cfg.count);
    std::vector<std::string> notes;
    for (int i = 0; i < cfg.count; ++i) {
        const std::string name = index_name("sample", i) + ".png";
        save_image(images[i], (dir / name).string());
        notes.push_back("image " + name + " seed=" + std::to_string(sample_seed(cfg.seed, i)));
    }
    if (fx) notes.push_back("extractor " + fx->provenance());
    write_text(dir / "manifest.txt",
               manifest_text("sample", cfg, {{"checkpoint", file_digest(cfg.checkpoint)}, {"image", file_digest(cfg.image)}},
                             notes));
    std::cout << "sample: wrote " << cfg.count << " image(s) to " << dir.string() << "\n";
}

void cmd_eval(const RunConfig& cfg) {
    require(cfg.samples, "samples", "eval");
    require(cfg.ref_defect, "ref-defect", "eval");
    const auto paths = list_images(cfg.samples);
    std::vector<Image> samples;
    for (const auto& p : paths) samples.push_back(load_image(p.string()));
    const Image ref = load_image(cfg.ref_defect);
    std::optional<Image> clean;
    if (!cfg.ref_clean.empty()) clean = load_image(cfg.ref_clean);
    const FeatureExtractor fx = make_extractor(cfg, ref.channels);
    const MetricReport r = evaluate_batch(samples, ref, fx, clean ? &*clean : nullptr);

    const fs::path dir = ensure_dir(cfg.out);
    std::ostringstream per;
    per << "image,sifid_x1e3,lpips_x1e3\n";
    for (std::size_t i = 0; i < paths.size(); ++i) {
        per << paths[i].filename().string() << "," << fmt(1e3 * r.sifid_values[i]) << "," << fmt(1e3 * r.lpips_values[i])
            << "\n";
    }
    write_text(dir / "per_sample.csv", per.str());
    std::ostringstream csv, txt;
    csv << "row,sifid_mean_x1e3,sifid_std_x1e3,lpips_mean_x1e3,lpips_std_x1e3,sample_count\n";
    csv << "samples," << fmt(1e3 * r.sifid_mean) << "," << fmt(1e3 * r.sifid_std) << "," << fmt(1e3 * r.lpips_mean)
        << "," << fmt(1e3 * r.lpips_std) << "," << r.sample_count << "\n";
    txt << "metric (x1e3)         SIFID                LPIPS\n";
    txt << "samples (n=" << r.sample_count << ")   " << fmt6(1e3 * r.sifid_mean) << " +- " << fmt6(1e3 * r.sifid_std)
        << "   " << fmt6(1e3 * r.lpips_mean) << " +- " << fmt6(1e3 * r.lpips_std) << "\n";
    if (r.has_baseline) {
        csv << "baseline," << fmt(1e3 * r.baseline_sifid) << ",0," << fmt(1e3 * r.baseline_lpips) << ",0,1\n";
        txt << "baseline (defect vs clean)   " << fmt6(1e3 * r.baseline_sifid) << "   " << fmt6(1e3 * r.baseline_lpips)
            << "\n";
    }
    write_text(dir / "metrics.csv", csv.str());
    write_text(dir / "report.txt", txt.str());
    std::vector<std::pair<std::string, std::string>> digests{{"ref-defect", file_digest(cfg.ref_defect)}};
    if (clean) digests.emplace_back("ref-clean", file_digest(cfg.ref_clean));
    for (const auto& p : paths) digests.emplace_back(p.filename().string(), file_digest(p.string()));
    write_text(dir / "manifest.txt", manifest_text("eval", cfg, digests, {"extractor " + fx.provenance()}));
    std::cout << txt.str();
}

void cmd_segtrain(const RunConfig& cfg) {
    const SegTrainConfig tcfg = cfg.seg_train();
    SegConfig mcfg = cfg.seg_model();
    const fs::path dir = ensure_dir(cfg.out);
    std::vector<LabeledImage> data;
    std::vector<std::pair<std::string, std::string>> digests;
    if (!cfg.data.empty()) {
        data = load_labeled(cfg.data);
        for (const auto& p : list_images(cfg.data)) digests.emplace_back(p.filename().string(), file_digest(p.string()));
    } else if (!cfg.samples.empty() && !cfg.ref_clean.empty()) {
        // Generated samples labeled by difference against the clean reference.
        const Image clean = load_image(cfg.ref_clean);
        digests.emplace_back("ref-clean", file_digest(cfg.ref_clean));
        const fs::path labels = ensure_dir((dir / "labels").string());
        for (const auto& p : list_images(cfg.samples)) {
            LabeledImage li;
            li.image = load_image(p.string());
            li.mask = pseudo_label(li.image, clean, cfg.label_threshold);
            save_mask(li.mask, (labels / (p.stem().string() + ".mask.png")).string());
            digests.emplace_back(p.filename().string(), file_digest(p.string()));
            data.push_back(std::move(li));
        }
    } else {
        throw ConfigError("segtrain needs --data, or --samples with --ref-clean");
    }
    mcfg.in_channels = data.front().image.channels;
    std::vector<double> losses;
    const SegModel model = train_segmenter(data, mcfg, tcfg, &losses);
    model.save((dir / "segmenter.bin").string());
    std::ostringstream csv;
    csv << "epoch,loss\n";
    for (std::size_t e = 0; e < losses.size(); ++e) csv << e + 1 << "," << fmt(losses[e]) << "\n";
    write_text(dir / "seg_loss.csv", csv.str());
    write_text(dir / "manifest.txt", manifest_text("segtrain", cfg, digests, {"items " + std::to_string(data.size())}));
    std::cout << "segtrain: " << data.size() << " items, final epoch loss " << losses.back() << "\n";
}

void cmd_segeval(const RunConfig& cfg) {
    require(cfg.data, "data", "segeval");
    const auto paths = list_images(cfg.data);
    const auto test = load_labeled(cfg.data);
    const fs::path dir = ensure_dir(cfg.out);
    std::vector<std::pair<std::string, std::string>> digests;
    std::vector<Mask> preds;
    if (!cfg.predictions.empty()) {
        for (const auto& p : paths) {
            const fs::path mp = fs::path(cfg.predictions) / (p.stem().string() + ".mask.png");
            preds.push_back(load_mask(mp.string()));
            digests.emplace_back("prediction " + mp.filename().string(), file_digest(mp.string()));
        }
    } else {
        require(cfg.segmenter, "segmenter", "segeval (or give --predictions)");
        const SegModel model = SegModel::load(cfg.segmenter);
        digests.emplace_back("segmenter", file_digest(cfg.segmenter));
        const fs::path pdir = ensure_dir((dir / "pred").string());
        for (std::size_t i = 0; i < test.size(); ++i) {
            preds.push_back(model.predict(test[i].image));
            save_mask(preds.back(), (pdir / (paths[i].stem().string() + ".mask.png")).string());
        }
    }
    for (const auto& p : paths) digests.emplace_back(p.filename().string(), file_digest(p.string()));
    std::ostringstream csv;
    csv << "image,iou,defects_pred,defects_true\n";
    std::vector<double> ious;
    for (std::size_t i = 0; i < test.size(); ++i) {
        if (preds[i].height != test[i].mask.height || preds[i].width != test[i].mask.width) {
            throw IoError("prediction dims differ for '" + paths[i].string() + "'");
        }
        ious.push_back(iou(preds[i], test[i].mask));
        csv << paths[i].filename().string() << "," << fmt(ious.back()) << "," << count_defects(preds[i], cfg.min_area)
            << "," << count_defects(test[i].mask, cfg.min_area) << "\n";
    }
    write_text(dir / "iou.csv", csv.str());
    const auto [mean, sd] = mean_std(ious);
    double defects = 0.0;
    for (const auto& m : preds) defects += count_defects(m, cfg.min_area);
    std::ostringstream summary;
    summary << "mean_iou,std_iou,count,mean_defects\n"
            << fmt(mean) << "," << fmt(sd) << "," << ious.size() << "," << fmt(defects / preds.size()) << "\n";
    write_text(dir / "summary.csv", summary.str());
    save_image(heatmap_to_image(defect_heatmap(preds)), (dir / "heatmap.png").string());
    write_text(dir / "manifest.txt", manifest_text("segeval", cfg, digests));
    std::cout << "segeval: IoU " << fmt6(mean) << " +- " << fmt6(sd) << " over " << ious.size() << " images\n";
}

void cmd_ablate(const RunConfig& cfg) {
    require(cfg.checkpoint, "checkpoint", "ablate");
    require(cfg.image, "image", "ablate");
    if (cfg.count < 2) throw ConfigError("ablate: --count must be >= 2");
    const SampleConfig base = cfg.sample();
    const auto steps_list = parse_double_list(cfg.steps_list, "--steps-list");
    const auto guidance_list = parse_double_list(cfg.guidance_list, "--guidance-list");
    for (double s : steps_list)
        if (s < 1 || s != static_cast<int>(s)) throw ConfigError("--steps-list values must be positive integers");
    for (double g : guidance_list)
        if (!(g >= 0.0)) throw ConfigError("--guidance-list values must be >= 0");
    TrainingData data = training_data(cfg);
    const Checkpoint ck = load_matching(cfg.checkpoint, data.src);
    const Image ref = cfg.ref_defect.empty() ? data.image : load_image(cfg.ref_defect);
    const FeatureExtractor fx = make_extractor(cfg, data.image.channels);
    const PerceptualEnergy energy(fx);
    const ModelField field(ck.model);
    const fs::path dir = ensure_dir(cfg.out);

    std::ostringstream csv;
    csv << "sweep,steps,guidance,sifid_mean_x1e3,sifid_std_x1e3,lpips_mean_x1e3,lpips_std_x1e3,count\n";
    auto run = [&](const char* sweep, int steps, double guidance) {
        SampleConfig sc = base;
        sc.steps = steps;
        sc.guidance = guidance;
        const auto images = sample_batch(field, data.src, sc, &energy, cfg.count);
        const MetricReport r = evaluate_batch(images, ref, fx);
        csv << sweep << "," << steps << "," << fmt(guidance) << "," << fmt(1e3 * r.sifid_mean) << ","
            << fmt(1e3 * r.sifid_std) << "," << fmt(1e3 * r.lpips_mean) << "," << fmt(1e3 * r.lpips_std) << ","
            << r.sample_count << "\n";
        std::cout << "ablate: " << sweep << " steps=" << steps << " guidance=" << guidance << " SIFID(x1e3) "
                  << fmt6(1e3 * r.sifid_mean) << " LPIPS(x1e3) " << fmt6(1e3 * r.lpips_mean) << "\n";
    };
    for (double s : steps_list) run("steps", static_cast<int>(s), base.guidance);
    for (double g : guidance_list) run("guidance", base.steps, g);
    write_text(dir / "ablation.csv", csv.str());
    std::vector<std::pair<std::string, std::string>> digests{{"checkpoint", file_digest(cfg.checkpoint)},
                                                             {"image", file_digest(cfg.image)}};
    if (!cfg.ref_defect.empty()) digests.emplace_back("ref-defect", file_digest(cfg.ref_defect));
    write_text(dir / "manifest.txt", manifest_text("ablate", cfg, digests, {"extractor " + fx.provenance()}));
}

}  // namespace sinsemi::cli
