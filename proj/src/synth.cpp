#include "refwin/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace refwin::synth {

using nlohmann::json;

MaskTrack MaskTrack::crop_frames(int f_begin, int f_end) const {
    MaskTrack out(f_end - f_begin, height, width);
    std::copy(masks.begin() + static_cast<size_t>(f_begin) * height * width,
              masks.begin() + static_cast<size_t>(f_end) * height * width,
              out.masks.begin());
    return out;
}

void SceneConfig::validate() const {
    require(frames >= 1 && height >= 1 && width >= 1 && channels >= 1, "bad scene shape");
    require(pat_h >= 1 && pat_w >= 1 && pat_h <= height && pat_w <= width,
            "pattern must fit the grid");
    require(min_entities >= 0 && max_entities >= min_entities, "bad entity bounds");
    require(min_len >= 1 && max_len >= min_len && min_len <= frames,
            "bad interval length bounds");
    require(bg_sigma >= 0.0, "bg_sigma must be non-negative");
    require(vocab >= 2, "vocab too small");
    require(area_threshold >= 1, "area threshold must be >= 1");
}

std::string scene_config_to_json(const SceneConfig& c) {
    json j;
    j["frames"] = c.frames;
    j["height"] = c.height;
    j["width"] = c.width;
    j["channels"] = c.channels;
    j["pat_h"] = c.pat_h;
    j["pat_w"] = c.pat_w;
    j["min_entities"] = c.min_entities;
    j["max_entities"] = c.max_entities;
    j["min_len"] = c.min_len;
    j["max_len"] = c.max_len;
    j["bg_sigma"] = c.bg_sigma;
    j["random_position"] = c.random_position;
    j["max_drift"] = c.max_drift;
    j["vocab"] = c.vocab;
    j["table_seed"] = c.table_seed;
    j["area_threshold"] = c.area_threshold;
    return j.dump(2);
}

SceneConfig scene_config_from_json(const std::string& text) {
    json j = json::parse(text);
    SceneConfig c;
    static const std::vector<std::string> known = {
        "frames", "height", "width", "channels", "pat_h", "pat_w", "min_entities",
        "max_entities", "min_len", "max_len", "bg_sigma", "random_position", "max_drift",
        "vocab", "table_seed", "area_threshold"};
    for (auto it = j.begin(); it != j.end(); ++it)
        require(std::find(known.begin(), known.end(), it.key()) != known.end(),
                "unknown scene config key: " + it.key());
    c.frames = j.value("frames", c.frames);
    c.height = j.value("height", c.height);
    c.width = j.value("width", c.width);
    c.channels = j.value("channels", c.channels);
    c.pat_h = j.value("pat_h", c.pat_h);
    c.pat_w = j.value("pat_w", c.pat_w);
    c.min_entities = j.value("min_entities", c.min_entities);
    c.max_entities = j.value("max_entities", c.max_entities);
    c.min_len = j.value("min_len", c.min_len);
    c.max_len = j.value("max_len", c.max_len);
    c.bg_sigma = j.value("bg_sigma", c.bg_sigma);
    c.random_position = j.value("random_position", c.random_position);
    c.max_drift = j.value("max_drift", c.max_drift);
    c.vocab = j.value("vocab", c.vocab);
    c.table_seed = j.value("table_seed", c.table_seed);
    c.area_threshold = j.value("area_threshold", c.area_threshold);
    c.validate();
    return c;
}

TokenGrid word_pattern(int word, const SceneConfig& cfg) {
    require(word >= 0 && word < cfg.vocab, "word id out of range");
    TokenGrid pat(1, cfg.pat_h, cfg.pat_w, cfg.channels);
    Rng rng(mix_seed(cfg.table_seed, static_cast<std::uint64_t>(word)));
    for (double& x : pat.data) x = rng.bernoulli(0.5) ? 1.0 : -1.0;
    return pat;
}

SynthScene generate_scene(std::uint64_t seed, const SceneConfig& cfg) {
    cfg.validate();
    Rng rng(mix_seed(seed, 0xC0FFEE));

    SynthScene scene;
    scene.seed = seed;
    scene.cfg = cfg;
    scene.video = gaussian_grid(cfg.frames, cfg.height, cfg.width, cfg.channels, rng,
                                cfg.bg_sigma);

    int n = static_cast<int>(rng.uniform_int(cfg.min_entities, cfg.max_entities));
    if (n == 0) return scene;

    // Disjoint column bands keep overlapping-time entities from stamping over
    // each other, so masks stay exact.
    if (n * cfg.pat_w > cfg.width)
        throw GenerationError("entities cannot fit spatially: " + std::to_string(n) +
                              " patterns of width " + std::to_string(cfg.pat_w) +
                              " on a grid of width " + std::to_string(cfg.width));
    int band_w = cfg.width / n;

    // unique words
    std::vector<int> words;
    while (static_cast<int>(words.size()) < n) {
        int w = static_cast<int>(rng.uniform_int(0, cfg.vocab - 1));
        if (std::find(words.begin(), words.end(), w) == words.end()) words.push_back(w);
    }

    for (int e = 0; e < n; ++e) {
        Entity ent;
        ent.id = e;
        ent.word = words[e];
        ent.pattern = word_pattern(ent.word, cfg);
        ent.track = MaskTrack(cfg.frames, cfg.height, cfg.width);

        int len = static_cast<int>(
            rng.uniform_int(cfg.min_len, std::min(cfg.max_len, cfg.frames)));
        ent.t0 = static_cast<int>(rng.uniform_int(0, cfg.frames - len));
        ent.t1 = ent.t0 + len - 1;

        int band_x0 = e * band_w;
        int x_max = band_x0 + band_w - cfg.pat_w;
        int y_max = cfg.height - cfg.pat_h;
        int px, py;
        if (cfg.random_position) {
            px = static_cast<int>(rng.uniform_int(band_x0, x_max));
            py = static_cast<int>(rng.uniform_int(0, y_max));
        } else {
            px = band_x0 + (band_w - cfg.pat_w) / 2;
            py = y_max / 2;
        }

        for (int f = ent.t0; f <= ent.t1; ++f) {
            if (cfg.max_drift > 0 && f > ent.t0) {
                int step = static_cast<int>(rng.uniform_int(-cfg.max_drift, cfg.max_drift));
                py = std::clamp(py + step, 0, y_max);
            }
            for (int yy = 0; yy < cfg.pat_h; ++yy) {
                for (int xx = 0; xx < cfg.pat_w; ++xx) {
                    for (int c = 0; c < cfg.channels; ++c)
                        scene.video.at(f, py + yy, px + xx, c) = ent.pattern.at(0, yy, xx, c);
                    ent.track.at(f, py + yy, px + xx) = 1;
                }
            }
        }
        scene.entities.push_back(std::move(ent));
    }
    return scene;
}

std::optional<PresenceInterval> extract_interval(const MaskTrack& track, int threshold) {
    require(track.frames >= 1, "empty track");
    require(threshold >= 1, "threshold must be >= 1");
    int first = -1, last = -1;
    for (int f = 0; f < track.frames; ++f) {
        if (track.area(f) >= threshold) {
            if (first < 0) first = f;
            last = f;
        }
    }
    if (first < 0) return std::nullopt;
    return PresenceInterval{first, last, threshold};
}

namespace {

// Mean mask IoU over frames where both tracks have any area; 0 when the
// tracks never co-occur.
double mean_overlap_iou(const MaskTrack& a, const MaskTrack& b) {
    require(a.frames == b.frames && a.height == b.height && a.width == b.width,
            "tracks must share shape");
    double acc = 0.0;
    int overlapping = 0;
    const int hw = a.height * a.width;
    for (int f = 0; f < a.frames; ++f) {
        int inter = 0, uni = 0, area_a = 0, area_b = 0;
        const std::uint8_t* ma = a.masks.data() + static_cast<size_t>(f) * hw;
        const std::uint8_t* mb = b.masks.data() + static_cast<size_t>(f) * hw;
        for (int i = 0; i < hw; ++i) {
            area_a += ma[i];
            area_b += mb[i];
            inter += ma[i] & mb[i];
            uni += ma[i] | mb[i];
        }
        if (area_a > 0 && area_b > 0) {
            ++overlapping;
            acc += static_cast<double>(inter) / static_cast<double>(uni);
        }
    }
    return overlapping == 0 ? 0.0 : acc / overlapping;
}

}  // namespace

std::vector<size_t> dedup_track_indices(const std::vector<MaskTrack>& tracks,
                                        double iou_threshold) {
    std::vector<bool> alive(tracks.size(), true);
    for (size_t i = 0; i < tracks.size(); ++i) {
        if (!alive[i]) continue;
        for (size_t j = i + 1; j < tracks.size(); ++j) {
            if (!alive[j]) continue;
            if (mean_overlap_iou(tracks[i], tracks[j]) > iou_threshold) alive[j] = false;
        }
    }
    std::vector<size_t> keep;
    for (size_t i = 0; i < tracks.size(); ++i)
        if (alive[i]) keep.push_back(i);
    return keep;
}

std::vector<MaskTrack> dedup_tracks(const std::vector<MaskTrack>& tracks,
                                    double iou_threshold) {
    std::vector<MaskTrack> out;
    for (size_t i : dedup_track_indices(tracks, iou_threshold)) out.push_back(tracks[i]);
    return out;
}

std::optional<RefSample> sample_reference(const SynthScene& scene, int entity_id, int f_a,
                                          int f_b, Rng& rng) {
    require(entity_id >= 0 && entity_id < static_cast<int>(scene.entities.size()),
            "unknown entity");
    require(0 <= f_a && f_a <= f_b && f_b < scene.cfg.frames, "bad window");
    const Entity& ent = scene.entities[entity_id];

    std::vector<int> outside_frames, inside_frames;
    for (int f = 0; f < scene.cfg.frames; ++f) {
        if (ent.track.area(f) == 0) continue;
        if (f < f_a || f > f_b)
            outside_frames.push_back(f);
        else
            inside_frames.push_back(f);
    }
    if (outside_frames.empty() && inside_frames.empty()) return std::nullopt;

    bool outside = !outside_frames.empty();
    const std::vector<int>& pool = outside ? outside_frames : inside_frames;
    int f = pool[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))];

    // bounding box of the mask at frame f
    int y0 = scene.cfg.height, y1 = -1, x0 = scene.cfg.width, x1 = -1;
    for (int y = 0; y < scene.cfg.height; ++y) {
        for (int x = 0; x < scene.cfg.width; ++x) {
            if (ent.track.at(f, y, x)) {
                y0 = std::min(y0, y);
                y1 = std::max(y1, y);
                x0 = std::min(x0, x);
                x1 = std::max(x1, x);
            }
        }
    }

    RefSample out;
    out.frame = f;
    out.outside = outside;
    out.grid = TokenGrid(1, scene.cfg.height, scene.cfg.width, scene.cfg.channels);
    int bh = y1 - y0 + 1, bw = x1 - x0 + 1;
    int cy = (scene.cfg.height - bh) / 2, cx = (scene.cfg.width - bw) / 2;
    for (int y = 0; y < bh; ++y)
        for (int x = 0; x < bw; ++x)
            for (int c = 0; c < scene.cfg.channels; ++c)
                out.grid.at(0, cy + y, cx + x, c) = scene.video.at(f, y0 + y, x0 + x, c);

    // presence clipped to the window, rebased to window-local frames
    auto present = extract_interval(ent.track.crop_frames(f_a, f_b + 1), 1);
    int window = f_b - f_a + 1;
    if (present) {
        out.interval = irope::IntervalSpec{static_cast<double>(present->t0),
                                           static_cast<double>(present->t1), window};
    } else {
        // never visible inside the window; degenerate zero-length interval at
        // the nearest window edge
        int edge = ent.t1 < f_a ? 0 : window - 1;
        out.interval =
            irope::IntervalSpec{static_cast<double>(edge), static_cast<double>(edge), window};
    }
    return out;
}

TokenGrid augment(const TokenGrid& ref, Rng& rng, const AugmentConfig& cfg) {
    TokenGrid out = ref;
    if (cfg.flip_prob > 0.0 && rng.bernoulli(cfg.flip_prob)) {
        for (int f = 0; f < out.frames; ++f)
            for (int y = 0; y < out.height; ++y)
                for (int x = 0; x < out.width / 2; ++x)
                    for (int c = 0; c < out.channels; ++c)
                        std::swap(out.at(f, y, x, c), out.at(f, y, out.width - 1 - x, c));
    }
    if (cfg.zoom_prob > 0.0 && rng.bernoulli(cfg.zoom_prob)) {
        double z = rng.uniform(cfg.zoom_lo, cfg.zoom_hi);
        TokenGrid zoomed = out;
        double cy = (out.height - 1) / 2.0, cx = (out.width - 1) / 2.0;
        for (int f = 0; f < out.frames; ++f)
            for (int y = 0; y < out.height; ++y)
                for (int x = 0; x < out.width; ++x) {
                    int sy = static_cast<int>(std::lround(cy + (y - cy) / z));
                    int sx = static_cast<int>(std::lround(cx + (x - cx) / z));
                    sy = std::clamp(sy, 0, out.height - 1);
                    sx = std::clamp(sx, 0, out.width - 1);
                    for (int c = 0; c < out.channels; ++c)
                        zoomed.at(f, y, x, c) = out.at(f, sy, sx, c);
                }
        out = std::move(zoomed);
    }
    if (cfg.jitter_amp > 0.0) {
        for (double& v : out.data) v += rng.uniform(-cfg.jitter_amp, cfg.jitter_amp);
    }
    if (cfg.smooth_prob > 0.0 && rng.bernoulli(cfg.smooth_prob)) {
        TokenGrid sm = out;
        for (int f = 0; f < out.frames; ++f)
            for (int y = 0; y < out.height; ++y)
                for (int x = 0; x < out.width; ++x)
                    for (int c = 0; c < out.channels; ++c) {
                        double acc = 0.0;
                        int cnt = 0;
                        for (int dy = -1; dy <= 1; ++dy)
                            for (int dx = -1; dx <= 1; ++dx) {
                                int yy = y + dy, xx = x + dx;
                                if (yy < 0 || yy >= out.height || xx < 0 || xx >= out.width)
                                    continue;
                                acc += out.at(f, yy, xx, c);
                                ++cnt;
                            }
                        sm.at(f, y, x, c) = (1.0 - cfg.smooth_strength) * out.at(f, y, x, c) +
                                            cfg.smooth_strength * acc / cnt;
                    }
        out = std::move(sm);
    }
    return out;
}

// --- serialization -----------------------------------------------------------

namespace {

json rle_frames(const MaskTrack& t) {
    json frames = json::array();
    const int hw = t.height * t.width;
    for (int f = 0; f < t.frames; ++f) {
        json runs = json::array();
        const std::uint8_t* m = t.masks.data() + static_cast<size_t>(f) * hw;
        int i = 0;
        while (i < hw) {
            if (m[i]) {
                int start = i;
                while (i < hw && m[i]) ++i;
                runs.push_back({start, i - start});
            } else {
                ++i;
            }
        }
        frames.push_back(std::move(runs));
    }
    return frames;
}

MaskTrack track_from_rle(const json& frames, int h, int w) {
    MaskTrack t(static_cast<int>(frames.size()), h, w);
    const int hw = h * w;
    for (size_t f = 0; f < frames.size(); ++f) {
        for (const auto& run : frames[f]) {
            int start = run[0].get<int>(), len = run[1].get<int>();
            require(start >= 0 && len >= 0 && start + len <= hw, "bad RLE run");
            for (int i = 0; i < len; ++i)
                t.masks[static_cast<size_t>(f) * hw + start + i] = 1;
        }
    }
    return t;
}

void write_doubles(std::ofstream& os, const std::vector<double>& v) {
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
}

}  // namespace

std::string mask_track_to_rle_json(const MaskTrack& track) {
    json j;
    j["height"] = track.height;
    j["width"] = track.width;
    j["frames"] = rle_frames(track);
    return j.dump();
}

MaskTrack mask_track_from_rle_json(const std::string& text) {
    json j = json::parse(text);
    return track_from_rle(j["frames"], j["height"].get<int>(), j["width"].get<int>());
}

void save_scene(const SynthScene& scene, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    std::ofstream bin(fs::path(dir) / "tensors.bin", std::ios::binary);
    require(bin.good(), "cannot open tensors.bin for writing");
    size_t offset = 0;

    json manifest;
    manifest["seed"] = scene.seed;
    manifest["config"] = json::parse(scene_config_to_json(scene.cfg));
    manifest["video"] = {{"offset", offset},
                         {"shape", {scene.video.frames, scene.video.height,
                                    scene.video.width, scene.video.channels}}};
    write_doubles(bin, scene.video.data);
    offset += scene.video.data.size();

    json ents = json::array();
    for (const auto& e : scene.entities) {
        json je;
        je["id"] = e.id;
        je["word"] = e.word;
        je["interval"] = {e.t0, e.t1};
        je["pattern"] = {{"offset", offset},
                         {"shape", {e.pattern.frames, e.pattern.height, e.pattern.width,
                                    e.pattern.channels}}};
        write_doubles(bin, e.pattern.data);
        offset += e.pattern.data.size();
        je["track"] = json::parse(mask_track_to_rle_json(e.track));
        ents.push_back(std::move(je));
    }
    manifest["entities"] = ents;

    std::ofstream mf(fs::path(dir) / "manifest.json");
    require(mf.good(), "cannot open manifest.json for writing");
    mf << manifest.dump(2) << '\n';
}

namespace {

TokenGrid read_grid(std::ifstream& bin, const json& desc) {
    auto shape = desc["shape"];
    TokenGrid g(shape[0].get<int>(), shape[1].get<int>(), shape[2].get<int>(),
                shape[3].get<int>());
    bin.seekg(static_cast<std::streamoff>(desc["offset"].get<size_t>() * sizeof(double)));
    bin.read(reinterpret_cast<char*>(g.data.data()),
             static_cast<std::streamsize>(g.data.size() * sizeof(double)));
    require(bin.good(), "tensors.bin truncated");
    return g;
}

}  // namespace

SynthScene load_scene(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream mf(fs::path(dir) / "manifest.json");
    require(mf.good(), "cannot open manifest.json");
    json manifest = json::parse(mf);

    std::ifstream bin(fs::path(dir) / "tensors.bin", std::ios::binary);
    require(bin.good(), "cannot open tensors.bin");

    SynthScene scene;
    scene.seed = manifest["seed"].get<std::uint64_t>();
    scene.cfg = scene_config_from_json(manifest["config"].dump());
    scene.video = read_grid(bin, manifest["video"]);
    for (const auto& je : manifest["entities"]) {
        Entity e;
        e.id = je["id"].get<int>();
        e.word = je["word"].get<int>();
        e.t0 = je["interval"][0].get<int>();
        e.t1 = je["interval"][1].get<int>();
        e.pattern = read_grid(bin, je["pattern"]);
        e.track = track_from_rle(je["track"]["frames"], je["track"]["height"].get<int>(),
                                 je["track"]["width"].get<int>());
        scene.entities.push_back(std::move(e));
    }
    return scene;
}

}  // namespace refwin::synth
