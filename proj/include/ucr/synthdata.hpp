#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ucr/matrix.hpp"
#include "ucr/rng.hpp"

// Deterministic generator of multi-grained retrieval triplets. Items live on
// a concept-prototype + binary-attribute lattice; the text channel encodes the
// attribute delta between source and target. Fine queries spell out the full
// delta (unique valid target); coarse queries withhold attribute dimensions,
// leaving exactly k items of the concept consistent with the request, only one
// of which is labeled. That makes the coarse label genuinely ambiguous, which
// is the behavior the uncertainty objective is built for.

namespace ucr::synth {

enum class Granularity { Fine, Coarse };

struct SynthSpec {
    int n_concepts = 20;
    int n_attributes = 4;
    int items_per_concept = 16;  // must equal 2^n_attributes
    double coarse_fraction = 0.5;
    int coarse_multiplicity = 4;  // k; must be a power of two in [2, items_per_concept]
    double noise_level = 0.05;
    int d_in = 32;  // image-vector dimension
    int t_in = 16;  // text-vector dimension; needs 2 dims per attribute
    int n_train_triplets = 2000;
    int n_eval_queries = 500;
    double eval_item_fraction = 0.25;
    std::uint64_t seed = 1;

    int n_items() const { return n_concepts * items_per_concept; }

    void validate() const {
        auto fail = [](const std::string& field, const std::string& why) {
            throw std::invalid_argument("invalid spec field '" + field + "': " + why);
        };
        if (n_concepts < 1) fail("n_concepts", "must be >= 1");
        if (n_attributes < 1 || n_attributes > 20) fail("n_attributes", "must be in [1,20]");
        if (items_per_concept != (1 << n_attributes))
            fail("items_per_concept", "must equal 2^n_attributes");
        if (coarse_fraction < 0.0 || coarse_fraction > 1.0)
            fail("coarse_fraction", "must be in [0,1]");
        const int k = coarse_multiplicity;
        if (k < 2 || (k & (k - 1)) != 0 || k > items_per_concept)
            fail("coarse_multiplicity",
                 "multiplicity unsatisfiable: needs a power of two in [2, items_per_concept]");
        if (noise_level < 0.0) fail("noise_level", "must be >= 0");
        if (d_in < 1) fail("d_in", "must be >= 1");
        if (t_in < 2 * n_attributes) fail("t_in", "needs 2 dims per attribute");
        if (n_train_triplets < 1) fail("n_train_triplets", "must be >= 1");
        if (n_eval_queries < 1) fail("n_eval_queries", "must be >= 1");
        if (eval_item_fraction <= 0.0 || eval_item_fraction >= 1.0)
            fail("eval_item_fraction", "must be in (0,1)");
        const int eval_items = eval_items_per_concept();
        if (eval_items < 2 || items_per_concept - eval_items < 2)
            fail("eval_item_fraction", "needs >= 2 train and >= 2 eval items per concept");
    }

    int eval_items_per_concept() const {
        const int e = static_cast<int>(eval_item_fraction * items_per_concept + 0.5);
        return std::max(2, e);
    }
};

struct Triplet {
    std::vector<double> source_vec;
    std::vector<double> text_vec;
    int source_id = -1;
    int target_id = -1;
    Granularity granularity = Granularity::Fine;
    std::vector<int> valid_targets;  // sorted, distinct
};

struct Item {
    int concept_id = 0;
    std::uint32_t bits = 0;
};

struct Dataset {
    SynthSpec spec;
    Matrix gallery;           // n_items x d_in, row index == item id
    std::vector<Item> items;  // metadata per gallery row
    std::vector<int> train_item_ids;
    std::vector<int> eval_item_ids;
    std::vector<Triplet> train;
    std::vector<Triplet> eval_queries;
};

namespace detail {

// Geometry scales: prototypes close enough that concepts genuinely compete in
// a ranking, attributes strong enough that the text signal is recoverable.
inline constexpr double kPrototypeScale = 0.45;
inline constexpr double kAttributeScale = 0.8;
inline constexpr double kTextScale = 2.0;

inline std::vector<double> encode_text(const SynthSpec& spec, std::uint32_t source_bits,
                                       std::uint32_t target_bits, std::uint32_t mask) {
    std::vector<double> text(spec.t_in, 0.0);
    for (int a = 0; a < spec.n_attributes; ++a) {
        if (!(mask >> a & 1u)) continue;
        const double from = (source_bits >> a) & 1u;
        const double to = (target_bits >> a) & 1u;
        text[2 * a] = kTextScale * (to - from);
        text[2 * a + 1] = kTextScale;  // attribute explicitly specified
    }
    return text;
}

}  // namespace detail

inline Dataset generate(const SynthSpec& spec) {
    spec.validate();
    Rng base(spec.seed);
    Rng geom_rng = base.stream(0x67656f6d);    // item geometry
    Rng split_rng = base.stream(0x73706c69);   // train/eval item split
    Rng train_rng = base.stream(0x74726169);   // train triplet sampling
    Rng eval_rng = base.stream(0x6576616c);    // eval query sampling

    Dataset ds;
    ds.spec = spec;
    const int n = spec.n_items();

    // concept prototypes and shared attribute directions
    Matrix prototypes(spec.n_concepts, spec.d_in);
    for (double& v : prototypes.data) v = detail::kPrototypeScale * geom_rng.normal();
    Matrix attr_dirs(spec.n_attributes, spec.d_in);
    for (double& v : attr_dirs.data) v = detail::kAttributeScale * geom_rng.normal();

    ds.gallery = Matrix(n, spec.d_in);
    ds.items.resize(n);
    for (int c = 0; c < spec.n_concepts; ++c)
        for (int b = 0; b < spec.items_per_concept; ++b) {
            const int id = c * spec.items_per_concept + b;
            ds.items[id] = Item{c, static_cast<std::uint32_t>(b)};
            for (int j = 0; j < spec.d_in; ++j) {
                double v = prototypes(c, j);
                for (int a = 0; a < spec.n_attributes; ++a)
                    if (b >> a & 1) v += attr_dirs(a, j);
                v += spec.noise_level * geom_rng.normal();
                ds.gallery(id, j) = v;
            }
        }

    // disjoint-by-item train/eval split, per concept
    const int eval_per_concept = spec.eval_items_per_concept();
    for (int c = 0; c < spec.n_concepts; ++c) {
        std::vector<int> ids(spec.items_per_concept);
        for (int b = 0; b < spec.items_per_concept; ++b)
            ids[b] = c * spec.items_per_concept + b;
        for (std::size_t i = ids.size() - 1; i > 0; --i)
            std::swap(ids[i], ids[split_rng.uniform_int(i + 1)]);
        for (int i = 0; i < spec.items_per_concept; ++i)
            (i < eval_per_concept ? ds.eval_item_ids : ds.train_item_ids).push_back(ids[i]);
    }
    std::sort(ds.train_item_ids.begin(), ds.train_item_ids.end());
    std::sort(ds.eval_item_ids.begin(), ds.eval_item_ids.end());

    // per-concept views of the split
    std::vector<std::vector<int>> train_by_concept(spec.n_concepts);
    std::vector<std::vector<int>> eval_by_concept(spec.n_concepts);
    for (int id : ds.train_item_ids) train_by_concept[ds.items[id].concept_id].push_back(id);
    for (int id : ds.eval_item_ids) eval_by_concept[ds.items[id].concept_id].push_back(id);

    const int u = [&] {  // unspecified attributes for a coarse query
        int bits = 0;
        while ((1 << bits) < spec.coarse_multiplicity) ++bits;
        return bits;
    }();

    // Labeling policy. Training labels follow a consistent annotator
    // convention — the "minimal change" item keeping unspecified attributes
    // as the source has them — so one pattern always carries one label and a
    // model can in principle fit every training triplet. Eval labels are
    // drawn uniformly over the valid set instead: at test time any of the k
    // consistent items may be the ground truth, which is the one-to-many
    // setting the coarse stratum probes.
    auto make_triplet = [&](const std::vector<std::vector<int>>& pool_by_concept,
                            Rng& rng, bool convention_label) {
        for (int attempt = 0; attempt < 1000; ++attempt) {
            const int concept_id = static_cast<int>(rng.uniform_int(spec.n_concepts));
            const auto& pool = pool_by_concept[concept_id];
            const int s = pool[rng.uniform_int(pool.size())];
            int t = s;
            while (t == s) t = pool[rng.uniform_int(pool.size())];
            const bool coarse = rng.bernoulli(spec.coarse_fraction);

            std::uint32_t mask;
            if (coarse) {
                // withhold u attributes, chosen uniformly
                std::vector<int> attrs(spec.n_attributes);
                for (int a = 0; a < spec.n_attributes; ++a) attrs[a] = a;
                for (std::size_t i = attrs.size() - 1; i > 0; --i)
                    std::swap(attrs[i], attrs[rng.uniform_int(i + 1)]);
                mask = (1u << spec.n_attributes) - 1u;
                for (int i = 0; i < u; ++i) mask &= ~(1u << attrs[i]);
            } else {
                mask = (1u << spec.n_attributes) - 1u;
            }

            const std::uint32_t sb = ds.items[s].bits;
            const std::uint32_t tb = ds.items[t].bits;
            // all items of the concept whose bits agree with the target on the mask
            std::vector<int> valid;
            for (int b = 0; b < spec.items_per_concept; ++b) {
                const int id = concept_id * spec.items_per_concept + b;
                if ((ds.items[id].bits & mask) == (tb & mask)) valid.push_back(id);
            }
            if (static_cast<int>(valid.size()) !=
                (coarse ? spec.coarse_multiplicity : 1))
                throw std::logic_error("multiplicity unsatisfiable");

            int labeled;
            if (convention_label) {
                const std::uint32_t rule_bits = (tb & mask) | (sb & ~mask);
                labeled = concept_id * spec.items_per_concept +
                          static_cast<int>(rule_bits);
                // resample until the convention's pick exists in this split
                if (labeled == s ||
                    std::find(pool.begin(), pool.end(), labeled) == pool.end())
                    continue;
            } else {
                std::vector<int> eligible;
                for (int id : valid)
                    if (id != s &&
                        std::find(pool.begin(), pool.end(), id) != pool.end())
                        eligible.push_back(id);
                labeled = eligible[rng.uniform_int(eligible.size())];
            }

            Triplet tr;
            tr.source_id = s;
            tr.target_id = labeled;
            tr.granularity = coarse ? Granularity::Coarse : Granularity::Fine;
            tr.valid_targets = valid;
            tr.text_vec = detail::encode_text(spec, sb, tb, mask);
            const auto row = ds.gallery.row(s);
            tr.source_vec.assign(row.begin(), row.end());
            return tr;
        }
        throw std::logic_error("triplet sampling failed to satisfy the split");
    };

    ds.train.reserve(spec.n_train_triplets);
    for (int i = 0; i < spec.n_train_triplets; ++i)
        ds.train.push_back(make_triplet(train_by_concept, train_rng, true));
    ds.eval_queries.reserve(spec.n_eval_queries);
    for (int i = 0; i < spec.n_eval_queries; ++i)
        ds.eval_queries.push_back(make_triplet(eval_by_concept, eval_rng, false));
    return ds;
}

inline std::pair<std::vector<Triplet>, std::vector<Triplet>> coarse_split(
    const std::vector<Triplet>& queries) {
    std::pair<std::vector<Triplet>, std::vector<Triplet>> out;
    for (const auto& q : queries)
        (q.granularity == Granularity::Coarse ? out.first : out.second).push_back(q);
    return out;
}

// ---------------------------------------------------------------------------
// on-disk format: magic, JSON spec header, raw row-major arrays

namespace detail {

constexpr char kMagic[8] = {'U', 'C', 'R', 'D', 'S', '0', '0', '1'};

template <class T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("dataset file truncated");
    return v;
}

inline void put_doubles(std::ostream& os, const std::vector<double>& v) {
    put<std::uint64_t>(os, v.size());
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline std::vector<double> get_doubles(std::istream& is) {
    std::vector<double> v(get<std::uint64_t>(is));
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!is) throw std::runtime_error("dataset file truncated");
    return v;
}

inline void put_ints(std::ostream& os, const std::vector<int>& v) {
    put<std::uint64_t>(os, v.size());
    for (int x : v) put<std::int32_t>(os, x);
}

inline std::vector<int> get_ints(std::istream& is) {
    std::vector<int> v(get<std::uint64_t>(is));
    for (auto& x : v) x = get<std::int32_t>(is);
    return v;
}

}  // namespace detail

inline nlohmann::json spec_to_json(const SynthSpec& s) {
    return {{"n_concepts", s.n_concepts},
            {"n_attributes", s.n_attributes},
            {"items_per_concept", s.items_per_concept},
            {"coarse_fraction", s.coarse_fraction},
            {"coarse_multiplicity", s.coarse_multiplicity},
            {"noise_level", s.noise_level},
            {"d_in", s.d_in},
            {"t_in", s.t_in},
            {"n_train_triplets", s.n_train_triplets},
            {"n_eval_queries", s.n_eval_queries},
            {"eval_item_fraction", s.eval_item_fraction},
            {"seed", s.seed}};
}

inline SynthSpec spec_from_json(const nlohmann::json& j) {
    SynthSpec s;
    for (const auto& [key, value] : j.items()) {
        if (key == "n_concepts") s.n_concepts = value;
        else if (key == "n_attributes") s.n_attributes = value;
        else if (key == "items_per_concept") s.items_per_concept = value;
        else if (key == "coarse_fraction") s.coarse_fraction = value;
        else if (key == "coarse_multiplicity") s.coarse_multiplicity = value;
        else if (key == "noise_level") s.noise_level = value;
        else if (key == "d_in") s.d_in = value;
        else if (key == "t_in") s.t_in = value;
        else if (key == "n_train_triplets") s.n_train_triplets = value;
        else if (key == "n_eval_queries") s.n_eval_queries = value;
        else if (key == "eval_item_fraction") s.eval_item_fraction = value;
        else if (key == "seed") s.seed = value;
        else throw std::invalid_argument("invalid spec field '" + key + "': unknown key");
    }
    s.validate();
    return s;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os.write(detail::kMagic, sizeof(detail::kMagic));
    const std::string header = spec_to_json(ds.spec).dump();
    detail::put<std::uint64_t>(os, header.size());
    os.write(header.data(), static_cast<std::streamsize>(header.size()));

    detail::put<std::uint64_t>(os, ds.gallery.rows);
    detail::put<std::uint64_t>(os, ds.gallery.cols);
    detail::put_doubles(os, ds.gallery.data);
    for (const auto& it : ds.items) {
        detail::put<std::int32_t>(os, it.concept_id);
        detail::put<std::uint32_t>(os, it.bits);
    }
    detail::put_ints(os, ds.train_item_ids);
    detail::put_ints(os, ds.eval_item_ids);
    for (const auto* split : {&ds.train, &ds.eval_queries}) {
        detail::put<std::uint64_t>(os, split->size());
        for (const auto& tr : *split) {
            detail::put<std::int32_t>(os, tr.source_id);
            detail::put<std::int32_t>(os, tr.target_id);
            detail::put<std::uint8_t>(os, tr.granularity == Granularity::Coarse ? 1 : 0);
            detail::put_ints(os, tr.valid_targets);
            detail::put_doubles(os, tr.text_vec);
        }
    }
    if (!os) throw std::runtime_error("write failed: " + path);
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open dataset: " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || !std::equal(magic, magic + 8, detail::kMagic))
        throw std::runtime_error("not a ucr dataset file: " + path);
    std::string header(detail::get<std::uint64_t>(is), '\0');
    is.read(header.data(), static_cast<std::streamsize>(header.size()));
    Dataset ds;
    ds.spec = spec_from_json(nlohmann::json::parse(header));

    ds.gallery.rows = detail::get<std::uint64_t>(is);
    ds.gallery.cols = detail::get<std::uint64_t>(is);
    ds.gallery.data = detail::get_doubles(is);
    if (ds.gallery.data.size() != ds.gallery.rows * ds.gallery.cols)
        throw std::runtime_error("dataset gallery shape mismatch");
    ds.items.resize(ds.gallery.rows);
    for (auto& it : ds.items) {
        it.concept_id = detail::get<std::int32_t>(is);
        it.bits = detail::get<std::uint32_t>(is);
    }
    ds.train_item_ids = detail::get_ints(is);
    ds.eval_item_ids = detail::get_ints(is);
    for (auto* split : {&ds.train, &ds.eval_queries}) {
        split->resize(detail::get<std::uint64_t>(is));
        for (auto& tr : *split) {
            tr.source_id = detail::get<std::int32_t>(is);
            tr.target_id = detail::get<std::int32_t>(is);
            tr.granularity =
                detail::get<std::uint8_t>(is) ? Granularity::Coarse : Granularity::Fine;
            tr.valid_targets = detail::get_ints(is);
            tr.text_vec = detail::get_doubles(is);
            const auto row = ds.gallery.row(static_cast<std::size_t>(tr.source_id));
            tr.source_vec.assign(row.begin(), row.end());
        }
    }
    return ds;
}

}  // namespace ucr::synth
