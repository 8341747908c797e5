#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "wcmorph/csv.hpp"
#include "wcmorph/image.hpp"
#include "wcmorph/rng.hpp"
#include "wcmorph/weights.hpp"

using namespace wcm;

namespace {

std::filesystem::path scratch_dir() {
    auto dir = std::filesystem::temp_directory_path() / "wcmorph_io_test";
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace

TEST(Base64, KnownVectors) {
    using detail::base64_decode;
    using detail::base64_encode;
    EXPECT_EQ(base64_encode({'M', 'a', 'n'}), "TWFu");
    EXPECT_EQ(base64_encode({'M', 'a'}), "TWE=");
    EXPECT_EQ(base64_encode({'M'}), "TQ==");
    EXPECT_EQ(base64_decode("TWFu"), (std::vector<std::uint8_t>{'M', 'a', 'n'}));
    EXPECT_EQ(base64_decode("TQ=="), (std::vector<std::uint8_t>{'M'}));
    EXPECT_THROW(base64_decode("a"), FormatError);
    EXPECT_THROW(base64_decode("a!=="), FormatError);
}

TEST(Weights, RoundTripPreservesBits) {
    Rng rng = make_rng(5);
    ModelWeights w;
    w.seed = 1234;
    w.set_hyper("alpha", "0.0001");
    Tensor a({3, 2});
    fill_gaussian(a, 0.0, 1.0, rng);
    Tensor b({4});
    fill_gaussian(b, 0.0, 1e-9, rng);
    w.add("layer.kernel", a);
    w.add("layer.bias", b);

    const auto path = (scratch_dir() / "w.json").string();
    save_weights(path, w);
    const ModelWeights r = load_weights(path);
    EXPECT_EQ(r.seed, 1234u);
    EXPECT_EQ(r.hyper("alpha"), "0.0001");
    ASSERT_EQ(r.entries.size(), 2u);
    EXPECT_EQ(r.entries[0].first, "layer.kernel");
    EXPECT_EQ(r.at("layer.kernel").vec(), a.vec());
    EXPECT_EQ(r.at("layer.bias").vec(), b.vec());
    EXPECT_TRUE(weights_equal(w, r));
}

TEST(Weights, VersionMismatchIsFormatError) {
    const auto path = (scratch_dir() / "bad.json").string();
    std::ofstream(path) << R"({"format":"wcmorph/weights/v999","seed":0,)"
                        << R"("hyperparameters":{},"parameters":[]})";
    EXPECT_THROW(load_weights(path), FormatError);
}

TEST(Weights, MissingFileIsStageDependencyError) {
    EXPECT_THROW(load_weights((scratch_dir() / "nope.json").string()), StageDependencyError);
}

TEST(Weights, DuplicateNameThrows) {
    ModelWeights w;
    w.add("p", Tensor({1}, {1.0}));
    EXPECT_THROW(w.add("p", Tensor({1}, {2.0})), ArgumentError);
}

TEST(Pgm, RoundTripQuantizesTo8Bit) {
    Image im(4, 5);
    for (std::size_t i = 0; i < im.numel(); ++i) im.px[i] = static_cast<double>(i) / 19.0;
    const auto path = (scratch_dir() / "img.pgm").string();
    save_pgm(path, im, "seed=9 config_hash=abc");
    const Image back = load_pgm(path);
    ASSERT_EQ(back.height, 4u);
    ASSERT_EQ(back.width, 5u);
    for (std::size_t i = 0; i < im.numel(); ++i) {
        EXPECT_NEAR(back.px[i], im.px[i], 0.5 / 255.0 + 1e-12);
    }
    // 8-bit exact values survive a second trip bitwise
    const auto path2 = (scratch_dir() / "img2.pgm").string();
    save_pgm(path2, back);
    EXPECT_EQ(load_pgm(path2), back);
}

TEST(Pgm, RejectsNonPgm) {
    const auto path = (scratch_dir() / "not.pgm").string();
    std::ofstream(path) << "P2\n2 2\n255\n0 0 0 0\n";
    EXPECT_THROW(load_pgm(path), FormatError);
}

TEST(Csv, RoundTripWithComments) {
    CsvFile csv;
    csv.comments = {"wcmorph/scores/v1 seed=3"};
    csv.header = {"kind", "angle"};
    csv.rows = {{"genuine", fmt_double(0.125)}, {"impostor", fmt_double(1.5)}};
    const auto path = (scratch_dir() / "scores.csv").string();
    write_csv(path, csv);
    const CsvFile back = read_csv(path);
    EXPECT_EQ(back.comments, csv.comments);
    EXPECT_EQ(back.header, csv.header);
    EXPECT_EQ(back.rows, csv.rows);
}

TEST(Csv, RowWidthMismatchIsFormatError) {
    const auto path = (scratch_dir() / "bad.csv").string();
    std::ofstream(path) << "a,b\n1,2\n3\n";
    EXPECT_THROW(read_csv(path), FormatError);
}

TEST(EmbeddingCsv, RoundTripValidatesNorms) {
    Rng rng = make_rng(17);
    std::vector<std::pair<std::string, Embedding>> rows;
    for (int i = 0; i < 3; ++i) {
        std::normal_distribution<double> gauss;
        std::vector<double> v(16);
        for (auto& x : v) x = gauss(rng);
        rows.emplace_back("e" + std::to_string(i), Embedding::normalized(std::move(v)));
    }
    const auto path = (scratch_dir() / "emb.csv").string();
    save_embeddings_csv(path, rows, {"wcmorph/embeddings/v1"});
    const auto back = load_embeddings_csv(path);
    ASSERT_EQ(back.size(), rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ(back[i].first, rows[i].first);
        EXPECT_EQ(back[i].second.values(), rows[i].second.values());
    }
}

TEST(EmbeddingCsv, NonUnitRowRejected) {
    const auto path = (scratch_dir() / "badnorm.csv").string();
    std::ofstream(path) << "id,dim0,dim1\nx,1.0,1.0\n";
    EXPECT_THROW(load_embeddings_csv(path), FormatError);
}
