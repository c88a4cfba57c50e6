#include <doctest.h>

#include <filesystem>
#include <random>

#include <unistd.h>

#include "unitscope/io.hpp"
#include "unitscope/nn.hpp"

using namespace unitscope;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir()
{
    auto d = fs::temp_directory_path() / ("unitscope_io_" + std::to_string(::getpid()));
    fs::create_directories(d);
    return d;
}

} // namespace

TEST_CASE("tensor round-trip is bit-identical and the header is as documented")
{
    const Tensor t = Tensor::from({2, 3}, {1.5f, -0.0f, 3.25f, 1e-30f, -7.0f, 42.0f});
    const auto bytes = encode_tensor(t);
    REQUIRE(bytes.size() == 4 + 3 + 2 * 4 + 6 * 4);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "UTSR");
    CHECK(bytes[4] == 1);
    CHECK(bytes[5] == 1);
    CHECK(bytes[6] == 2);
    CHECK(bytes[7] == 2);
    CHECK(bytes[11] == 3);
    const auto path = temp_dir() / "t.utsr";
    save_tensor(path, t);
    CHECK(bit_identical(load_tensor(path), t));
}

TEST_CASE("corrupt tensor files are rejected")
{
    auto bytes = encode_tensor(Tensor::from({2}, {1, 2}));
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_tensor(bad_magic), FormatError);
    auto truncated = bytes;
    truncated.pop_back();
    CHECK_THROWS_AS(decode_tensor(truncated), FormatError);
    auto longer = bytes;
    longer.push_back(0);
    CHECK_THROWS_AS(decode_tensor(longer), FormatError);
    auto zero_dim = bytes;
    zero_dim[7] = 0;
    CHECK_THROWS_AS(decode_tensor(zero_dim), FormatError);
}

TEST_CASE("zip container round-trips arbitrary entries")
{
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 5; ++trial) {
        Archive a;
        for (int e = 0; e < 1 + trial; ++e) {
            std::vector<std::uint8_t> data(rng() % 300);
            for (auto& b : data) b = static_cast<std::uint8_t>(rng());
            a["entry" + std::to_string(e) + ".bin"] = data;
        }
        CHECK(decode_zip(encode_zip(a)) == a);
    }
    auto z = encode_zip({{"x", {1, 2, 3}}});
    z[30 + 1] ^= 0xff; // flip a payload byte
    CHECK_THROWS_AS(decode_zip(z), FormatError);
}

TEST_CASE("trained model round-trip reproduces forward outputs bit-exactly")
{
    ModelSpec m;
    m.layers = {conv("c1", 3, 4), relu("r1"), maxpool("p1"), upsample_nearest("u"), conv("c2", 4, 2, 1, 1, 0),
                softmax("s")};
    m.input_shape = {3, 6, 6};
    m.output = OutputSemantics::segmentation_logits;
    const ParameterStore p = init_params(m, 77);
    const auto path = temp_dir() / "m.zip";
    save_model(path, m, p);
    const auto [m2, p2] = load_model(path);
    CHECK(to_json(m2) == to_json(m));
    CHECK(p2 == p);
    std::mt19937_64 rng(3);
    Tensor x({2, 3, 6, 6});
    for (float& v : x.storage()) v = std::uniform_real_distribution<float>()(rng);
    CHECK(bit_identical(forward(m, p, x).output, forward(m2, p2, x).output));
    // saving twice yields identical bytes
    const auto once = read_file(path);
    save_model(path, m2, p2);
    CHECK(read_file(path) == once);
}

TEST_CASE("png encoder emits a valid signature and header")
{
    const auto png = encode_png(Tensor({3, 4, 5}, 0.5f));
    CHECK(png[0] == 0x89);
    CHECK(std::string(png.begin() + 12, png.begin() + 16) == "IHDR");
    CHECK(png[19] == 5);
    CHECK(png[23] == 4);
    CHECK(base64_encode({'M', 'a', 'n'}) == "TWFu");
    CHECK(base64_encode({'M', 'a'}) == "TWE=");
    CHECK(base64_encode({'M'}) == "TQ==");
}
