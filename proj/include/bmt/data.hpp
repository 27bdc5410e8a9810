#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "bmt/binio.hpp"
#include "bmt/errors.hpp"
#include "bmt/rng.hpp"

namespace bmt {

enum class Modality : uint8_t { audio = 0, visual = 1 };

inline const char* modality_name(Modality m) { return m == Modality::audio ? "audio" : "visual"; }

// One modality's feature track: T rows of d values, each row spanning
// cell_seconds of media. Values are held in 64-bit but stored on disk as f32.
struct FeatureSequence {
    Modality modality = Modality::audio;
    size_t T = 0;
    size_t d = 0;
    double cell_seconds = 0.0;
    std::vector<double> values; // row-major T x d

    double& at(size_t t, size_t i) { return values[t * d + i]; }
    double at(size_t t, size_t i) const { return values[t * d + i]; }
    double span_seconds() const { return static_cast<double>(T) * cell_seconds; }
};

// ---------------------------------------------------------------------------
// BMTF feature file format (bit-exact):
//   magic "BMTF", u8 version=1, u8 modality, u16 reserved=0,
//   u32 T, u32 d, f32 cell_seconds, then T*d little-endian f32, row-major.
// ---------------------------------------------------------------------------

inline std::vector<uint8_t> encode_features(const FeatureSequence& f) {
    ByteWriter w;
    w.str("BMTF");
    w.u8(1);
    w.u8(static_cast<uint8_t>(f.modality));
    w.u16(0);
    w.u32(static_cast<uint32_t>(f.T));
    w.u32(static_cast<uint32_t>(f.d));
    w.f32(static_cast<float>(f.cell_seconds));
    for (double v : f.values) w.f32(static_cast<float>(v));
    return w.data();
}

inline void save_features(const std::filesystem::path& path, const FeatureSequence& f) {
    write_file_atomic(path, encode_features(f));
}

inline FeatureSequence decode_features(const std::vector<uint8_t>& bytes, const std::string& source) {
    ByteReader r(bytes.data(), bytes.size(), source);
    if (r.str(4) != "BMTF") r.fail("bad magic, expected \"BMTF\"");
    const uint8_t version = r.u8();
    if (version != 1) r.fail("unsupported version " + std::to_string(version));
    const uint8_t mod = r.u8();
    if (mod > 1) r.fail("unknown modality code " + std::to_string(mod));
    r.u16(); // reserved
    FeatureSequence f;
    f.modality = static_cast<Modality>(mod);
    f.T = r.u32();
    f.d = r.u32();
    if (f.T == 0 || f.d == 0) r.fail("zero feature dimension (T=" + std::to_string(f.T) +
                                     ", d=" + std::to_string(f.d) + ")");
    f.cell_seconds = static_cast<double>(r.f32());
    r.need(f.T * f.d * 4);
    f.values.resize(f.T * f.d);
    for (auto& v : f.values) v = static_cast<double>(r.f32());
    if (r.remaining() != 0) r.fail("trailing bytes after payload");
    return f;
}

inline FeatureSequence load_features(const std::filesystem::path& path) {
    return decode_features(read_file_bytes(path), path.string());
}

// ---------------------------------------------------------------------------
// Annotations (ActivityNet Captions schema)
// ---------------------------------------------------------------------------

struct EventSegment {
    double start_sec = 0.0;
    double end_sec = 0.0;
    std::string sentence;
};

struct VideoAnnotation {
    double duration_sec = 0.0;
    std::vector<EventSegment> segments;
};

// video id -> annotation; std::map keeps iteration deterministic.
using AnnotationSet = std::map<std::string, VideoAnnotation>;

inline nlohmann::ordered_json annotations_to_json(const AnnotationSet& ann) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& [vid, va] : ann) {
        nlohmann::ordered_json ts = nlohmann::ordered_json::array();
        nlohmann::ordered_json sents = nlohmann::ordered_json::array();
        for (const auto& seg : va.segments) {
            ts.push_back({seg.start_sec, seg.end_sec});
            sents.push_back(seg.sentence);
        }
        j[vid] = {{"duration", va.duration_sec}, {"timestamps", ts}, {"sentences", sents}};
    }
    return j;
}

inline AnnotationSet annotations_from_json(const nlohmann::json& j, const std::string& source) {
    AnnotationSet ann;
    if (!j.is_object()) throw FormatError(source + ": annotation root must be an object");
    for (const auto& [vid, entry] : j.items()) {
        VideoAnnotation va;
        va.duration_sec = entry.at("duration").get<double>();
        const auto& ts = entry.at("timestamps");
        const auto& sents = entry.at("sentences");
        if (ts.size() != sents.size())
            throw FormatError(source + ": video " + vid + " has " + std::to_string(ts.size()) +
                              " timestamps but " + std::to_string(sents.size()) + " sentences");
        for (size_t i = 0; i < ts.size(); ++i) {
            EventSegment seg;
            seg.start_sec = ts[i].at(0).get<double>();
            seg.end_sec = ts[i].at(1).get<double>();
            seg.sentence = sents[i].get<std::string>();
            if (!(seg.start_sec >= 0.0) || !(seg.end_sec > seg.start_sec))
                throw DataError(source + ": video " + vid + " segment " + std::to_string(i) +
                                " has invalid extent [" + std::to_string(seg.start_sec) + ", " +
                                std::to_string(seg.end_sec) + ")");
            va.segments.push_back(std::move(seg));
        }
        ann.emplace(vid, std::move(va));
    }
    return ann;
}

inline AnnotationSet load_annotations(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    nlohmann::json j;
    // JSON objects merge duplicate keys silently; catch duplicated video ids
    // at the root with a parser callback.
    std::vector<std::string> seen;
    std::string duplicate;
    nlohmann::json::parser_callback_t cb = [&](int depth, nlohmann::json::parse_event_t event,
                                               nlohmann::json& parsed) {
        if (event == nlohmann::json::parse_event_t::key && depth == 1) {
            const auto key = parsed.get<std::string>();
            if (std::find(seen.begin(), seen.end(), key) != seen.end() && duplicate.empty())
                duplicate = key;
            seen.push_back(key);
        }
        return true;
    };
    try {
        j = nlohmann::json::parse(bytes.begin(), bytes.end(), cb);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    if (!duplicate.empty())
        throw DataError(path.string() + ": duplicate video id \"" + duplicate + "\"");
    return annotations_from_json(j, path.string());
}

inline void save_annotations(const std::filesystem::path& path, const AnnotationSet& ann) {
    write_file_atomic(path, annotations_to_json(ann).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

// Lowercased tokens split on whitespace and punctuation.
inline std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

struct Vocabulary {
    static constexpr int pad_id = 0;
    static constexpr int start_id = 1;
    static constexpr int end_id = 2;
    static constexpr int unk_id = 3;

    std::vector<std::string> id_to_token;    // dense from 0, specials first
    std::map<std::string, int> token_to_id;
    std::vector<int64_t> counts;             // corpus counts (0 for specials)

    int size() const { return static_cast<int>(id_to_token.size()); }

    int lookup(const std::string& token) const {
        auto it = token_to_id.find(token);
        return it == token_to_id.end() ? unk_id : it->second;
    }

    std::vector<int> encode(const std::string& sentence) const {
        std::vector<int> ids;
        for (const auto& tok : tokenize(sentence)) ids.push_back(lookup(tok));
        return ids;
    }

    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        for (int id : ids) {
            if (id < 0 || id >= size()) continue;
            if (!out.empty()) out += ' ';
            out += id_to_token[static_cast<size_t>(id)];
        }
        return out;
    }
};

// Frequency-descending, then lexicographic id order; tokens below min_count
// fold into <unk>.
inline Vocabulary build_vocab(const AnnotationSet& annotations, int min_count = 1) {
    std::map<std::string, int64_t> counts;
    bool any_sentence = false;
    for (const auto& [vid, va] : annotations)
        for (const auto& seg : va.segments) {
            any_sentence = true;
            for (const auto& tok : tokenize(seg.sentence)) ++counts[tok];
        }
    if (!any_sentence) throw DataError("build_vocab: empty caption corpus");

    std::vector<std::pair<std::string, int64_t>> kept;
    for (const auto& [tok, c] : counts)
        if (c >= min_count) kept.emplace_back(tok, c);
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    Vocabulary v;
    v.id_to_token = {"<pad>", "<s>", "</s>", "<unk>"};
    v.counts = {0, 0, 0, 0};
    for (const auto& [tok, c] : kept) {
        v.token_to_id.emplace(tok, v.size());
        v.id_to_token.push_back(tok);
        v.counts.push_back(c);
    }
    v.token_to_id.emplace("<pad>", Vocabulary::pad_id);
    v.token_to_id.emplace("<s>", Vocabulary::start_id);
    v.token_to_id.emplace("</s>", Vocabulary::end_id);
    v.token_to_id.emplace("<unk>", Vocabulary::unk_id);
    return v;
}

// Dump format: one "token<TAB>id<TAB>count" line per entry.
inline void save_vocab(const std::filesystem::path& path, const Vocabulary& v) {
    std::string out;
    for (int id = 0; id < v.size(); ++id) {
        out += v.id_to_token[static_cast<size_t>(id)];
        out += '\t';
        out += std::to_string(id);
        out += '\t';
        out += std::to_string(v.counts[static_cast<size_t>(id)]);
        out += '\n';
    }
    write_file_atomic(path, out);
}

inline Vocabulary load_vocab(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    Vocabulary v;
    std::string line;
    size_t pos = 0;
    int expected_id = 0;
    while (pos < bytes.size()) {
        size_t eol = pos;
        while (eol < bytes.size() && bytes[eol] != '\n') ++eol;
        line.assign(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(eol));
        pos = eol + 1;
        if (line.empty()) continue;
        const size_t t1 = line.find('\t');
        const size_t t2 = line.find('\t', t1 == std::string::npos ? t1 : t1 + 1);
        if (t1 == std::string::npos || t2 == std::string::npos)
            throw FormatError(path.string() + ": malformed vocab line: " + line);
        const std::string tok = line.substr(0, t1);
        const int id = std::stoi(line.substr(t1 + 1, t2 - t1 - 1));
        const int64_t count = std::stoll(line.substr(t2 + 1));
        if (id != expected_id)
            throw FormatError(path.string() + ": non-dense id " + std::to_string(id));
        v.id_to_token.push_back(tok);
        v.counts.push_back(count);
        v.token_to_id.emplace(tok, id);
        ++expected_id;
    }
    if (v.size() < 4) throw FormatError(path.string() + ": vocabulary misses the special tokens");
    return v;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

// Zero-pads a feature sequence on the right to pad_to rows; the mask marks
// real rows. pad_to == 0 means "no padding" (keep T).
struct PaddedFeatures {
    FeatureSequence features;
    std::vector<uint8_t> valid; // length pad_to, 1 on real rows
};

inline PaddedFeatures pad_features(const FeatureSequence& f, size_t pad_to,
                                   const std::string& item_name) {
    const size_t target = pad_to == 0 ? f.T : pad_to;
    if (f.T > target)
        throw DataError("item " + item_name + ": " + modality_name(f.modality) + " length " +
                        std::to_string(f.T) + " exceeds pad length " + std::to_string(target));
    PaddedFeatures out;
    out.features = f;
    out.features.T = target;
    out.features.values.resize(target * f.d, 0.0);
    out.valid.assign(target, 0);
    std::fill(out.valid.begin(), out.valid.begin() + static_cast<long>(f.T), uint8_t{1});
    return out;
}

// Right-pads a token sequence with the pad id.
inline std::vector<int> pad_tokens(const std::vector<int>& ids, size_t pad_to) {
    std::vector<int> out = ids;
    out.resize(std::max(pad_to, ids.size()), Vocabulary::pad_id);
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic bi-modal dataset
// ---------------------------------------------------------------------------

// Every planted event carries an audio motif and a visual motif; the caption
// is a closed template over the motif pair, so captions are predictable from
// features and proposals from motif boundaries. Events are annotated twice
// (two simulated annotators) to mirror the dense, multi-annotator ground
// truth the evaluation protocol expects.
struct SynthSpec {
    int num_videos = 20;
    int audio_dim = 16;
    int visual_dim = 24;
    double audio_cell_seconds = 1.0;
    double visual_cell_seconds = 2.0;
    double duration_sec = 40.0;
    int events_per_video = 5;
    int annotators_per_event = 2;
    double annotator_jitter_sec = 0.02;
    int motif_count = 5;
    double pattern_strength = 3.0;
    double noise_std = 0.1;
    int vocab_cap = 200;
    uint64_t seed = 20260808ull;
};

inline SynthSpec synth_spec_from_json(const nlohmann::json& j) {
    SynthSpec s;
    if (j.contains("num_videos")) s.num_videos = j.at("num_videos").get<int>();
    if (j.contains("audio_dim")) s.audio_dim = j.at("audio_dim").get<int>();
    if (j.contains("visual_dim")) s.visual_dim = j.at("visual_dim").get<int>();
    if (j.contains("audio_cell_seconds")) s.audio_cell_seconds = j.at("audio_cell_seconds").get<double>();
    if (j.contains("visual_cell_seconds")) s.visual_cell_seconds = j.at("visual_cell_seconds").get<double>();
    if (j.contains("duration_sec")) s.duration_sec = j.at("duration_sec").get<double>();
    if (j.contains("events_per_video")) s.events_per_video = j.at("events_per_video").get<int>();
    if (j.contains("annotators_per_event")) s.annotators_per_event = j.at("annotators_per_event").get<int>();
    if (j.contains("annotator_jitter_sec")) s.annotator_jitter_sec = j.at("annotator_jitter_sec").get<double>();
    if (j.contains("motif_count")) s.motif_count = j.at("motif_count").get<int>();
    if (j.contains("pattern_strength")) s.pattern_strength = j.at("pattern_strength").get<double>();
    if (j.contains("noise_std")) s.noise_std = j.at("noise_std").get<double>();
    if (j.contains("vocab_cap")) s.vocab_cap = j.at("vocab_cap").get<int>();
    if (j.contains("seed")) s.seed = j.at("seed").get<uint64_t>();
    return s;
}

inline nlohmann::ordered_json synth_spec_to_json(const SynthSpec& s) {
    return {{"num_videos", s.num_videos},
            {"audio_dim", s.audio_dim},
            {"visual_dim", s.visual_dim},
            {"audio_cell_seconds", s.audio_cell_seconds},
            {"visual_cell_seconds", s.visual_cell_seconds},
            {"duration_sec", s.duration_sec},
            {"events_per_video", s.events_per_video},
            {"annotators_per_event", s.annotators_per_event},
            {"annotator_jitter_sec", s.annotator_jitter_sec},
            {"motif_count", s.motif_count},
            {"pattern_strength", s.pattern_strength},
            {"noise_std", s.noise_std},
            {"vocab_cap", s.vocab_cap},
            {"seed", s.seed}};
}

struct SynthDataset {
    AnnotationSet annotations;
    std::map<std::string, FeatureSequence> audio;  // video id -> features
    std::map<std::string, FeatureSequence> visual;
};

namespace detail {

inline const std::vector<std::string>& synth_audio_words() {
    static const std::vector<std::string> w = {"hum", "ring", "buzz", "chime", "drum",
                                               "whistle", "clang", "rattle", "purr", "thud"};
    return w;
}

inline const std::vector<std::string>& synth_visual_words() {
    static const std::vector<std::string> w = {"stripes", "dots", "waves", "grid", "sparks",
                                               "rings", "blocks", "arcs", "stars", "lines"};
    return w;
}

inline std::string synth_caption(int audio_motif, int visual_motif) {
    return "a " + synth_audio_words()[static_cast<size_t>(audio_motif)] + " sound over " +
           synth_visual_words()[static_cast<size_t>(visual_motif)] + " on screen";
}

// Each motif is a unit vector sharing a common "eventness" direction with the
// rest of its bank, plus a unique component that identifies it. The shared
// part keeps event cells linearly separable from background; the unique part
// keeps the motifs distinguishable for captioning.
inline std::vector<std::vector<double>> synth_motif_bank(int count, int dim, Rng& rng) {
    auto unit = [&rng](int d) {
        std::vector<double> v(static_cast<size_t>(d));
        double norm = 0.0;
        for (auto& x : v) {
            x = rng.gauss();
            norm += x * x;
        }
        norm = std::sqrt(std::max(norm, 1e-12));
        for (auto& x : v) x /= norm;
        return v;
    };
    const std::vector<double> shared = unit(dim);
    std::vector<std::vector<double>> bank(static_cast<size_t>(count));
    for (auto& v : bank) {
        const std::vector<double> unique = unit(dim);
        v.resize(static_cast<size_t>(dim));
        double norm = 0.0;
        for (size_t i = 0; i < v.size(); ++i) {
            v[i] = shared[i] + unique[i];
            norm += v[i] * v[i];
        }
        norm = std::sqrt(std::max(norm, 1e-12));
        for (auto& x : v) x /= norm;
    }
    return bank;
}

} // namespace detail

// Deterministic per seed: regenerating with the same spec yields identical bytes.
inline SynthDataset synth_dataset(const SynthSpec& spec) {
    if (spec.motif_count > static_cast<int>(detail::synth_audio_words().size()))
        throw ConfigError("synth_dataset: motif_count above " +
                          std::to_string(detail::synth_audio_words().size()) + " is not supported");
    Rng rng(spec.seed);
    auto audio_bank = detail::synth_motif_bank(spec.motif_count, spec.audio_dim, rng);
    auto visual_bank = detail::synth_motif_bank(spec.motif_count, spec.visual_dim, rng);

    SynthDataset out;
    const auto T_a = static_cast<size_t>(std::llround(spec.duration_sec / spec.audio_cell_seconds));
    const auto T_v = static_cast<size_t>(std::llround(spec.duration_sec / spec.visual_cell_seconds));

    for (int v = 0; v < spec.num_videos; ++v) {
        char vid[32];
        std::snprintf(vid, sizeof(vid), "synth_%04d", v);
        Rng vrng = rng.fork(static_cast<uint64_t>(v) + 1);

        FeatureSequence fa;
        fa.modality = Modality::audio;
        fa.T = T_a;
        fa.d = static_cast<size_t>(spec.audio_dim);
        fa.cell_seconds = spec.audio_cell_seconds;
        fa.values.resize(fa.T * fa.d);
        for (auto& x : fa.values) x = vrng.gauss(0.0, spec.noise_std);

        FeatureSequence fv;
        fv.modality = Modality::visual;
        fv.T = T_v;
        fv.d = static_cast<size_t>(spec.visual_dim);
        fv.cell_seconds = spec.visual_cell_seconds;
        fv.values.resize(fv.T * fv.d);
        for (auto& x : fv.values) x = vrng.gauss(0.0, spec.noise_std);

        VideoAnnotation va;
        va.duration_sec = spec.duration_sec;

        double cursor = vrng.uniform(0.5, 1.5);
        for (int e = 0; e < spec.events_per_video; ++e) {
            const double len = vrng.uniform(2.6, 5.4);
            if (cursor + len + 0.5 > spec.duration_sec) break;
            const double start = cursor;
            const double end = start + len;
            cursor = end + vrng.uniform(1.0, 2.0);

            const int ma = static_cast<int>(vrng.uniform_index(static_cast<size_t>(spec.motif_count)));
            const int mv = static_cast<int>(vrng.uniform_index(static_cast<size_t>(spec.motif_count)));

            // Stamp the motifs into every cell whose center lies in the event.
            for (size_t t = 0; t < fa.T; ++t) {
                const double center = (static_cast<double>(t) + 0.5) * fa.cell_seconds;
                if (center >= start && center < end)
                    for (size_t i = 0; i < fa.d; ++i)
                        fa.at(t, i) += spec.pattern_strength * audio_bank[static_cast<size_t>(ma)][i];
            }
            for (size_t t = 0; t < fv.T; ++t) {
                const double center = (static_cast<double>(t) + 0.5) * fv.cell_seconds;
                if (center >= start && center < end)
                    for (size_t i = 0; i < fv.d; ++i)
                        fv.at(t, i) += spec.pattern_strength * visual_bank[static_cast<size_t>(mv)][i];
            }

            const std::string caption = detail::synth_caption(ma, mv);
            for (int a = 0; a < spec.annotators_per_event; ++a) {
                double shift = a == 0 ? 0.0
                                      : vrng.uniform(-spec.annotator_jitter_sec, spec.annotator_jitter_sec);
                EventSegment seg;
                seg.start_sec = std::max(0.0, start + shift);
                seg.end_sec = std::min(spec.duration_sec, end + shift);
                seg.sentence = caption;
                va.segments.push_back(std::move(seg));
            }
        }

        out.annotations.emplace(vid, std::move(va));
        out.audio.emplace(vid, std::move(fa));
        out.visual.emplace(vid, std::move(fv));
    }
    return out;
}

// Writes features/<vid>.{audio,visual}.bmtf plus annotations.json and the config echo.
inline void save_synth_dataset(const std::filesystem::path& out_dir, const SynthSpec& spec,
                               const SynthDataset& ds) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir / "features");
    for (const auto& [vid, f] : ds.audio) save_features(out_dir / "features" / (vid + ".audio.bmtf"), f);
    for (const auto& [vid, f] : ds.visual) save_features(out_dir / "features" / (vid + ".visual.bmtf"), f);
    save_annotations(out_dir / "annotations.json", ds.annotations);
    write_file_atomic(out_dir / "dataset.config.json", synth_spec_to_json(spec).dump(2) + "\n");
}

} // namespace bmt
