#include "kdreg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "kdreg/error.hpp"

namespace kdreg {

namespace {

constexpr char kMagic[8] = {'K', 'D', 'R', 'E', 'G', 'B', 'I', 'N'};

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

template <typename T>
void put(std::ofstream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_string32(std::ofstream& os, const std::string& s) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
public:
    Reader(std::ifstream& is, std::filesystem::path path) : is_(is), path_(std::move(path)) {}

    template <typename T>
    T get() {
        T v{};
        read(reinterpret_cast<char*>(&v), sizeof(T));
        return v;
    }

    std::string bytes(std::uint64_t n) {
        if (n > (1ull << 34)) fail("implausible length field");
        std::string s(n, '\0');
        read(s.data(), n);
        return s;
    }

    void read(char* dst, std::uint64_t n) {
        is_.read(dst, static_cast<std::streamsize>(n));
        if (static_cast<std::uint64_t>(is_.gcount()) != n) fail("truncated file");
    }

    [[noreturn]] void fail(const std::string& what) const {
        throw DataError(path_.string() + ": " + what);
    }

private:
    std::ifstream& is_;
    std::filesystem::path path_;
};

}  // namespace

const ad::Tensor& Container::tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
        if (n == name) return t;
    }
    throw DataError(kind + " container: missing tensor '" + name + "'");
}

void write_container(const Container& c, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    os.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(os, kContainerVersion);
    put_string32(os, c.kind);
    const std::string meta = c.meta.dump();
    put<std::uint64_t>(os, meta.size());
    os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(c.tensors.size()));
    for (const auto& [name, t] : c.tensors) {
        put_string32(os, name);
        put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) put<std::uint64_t>(os, d);
        os.write(reinterpret_cast<const char*>(t.values().data()),
                 static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!os) throw DataError("write failed: " + path.string());
}

Container read_container(const std::filesystem::path& path, const std::string& expected_kind) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path.string());
    Reader r(is, path);
    char magic[8];
    r.read(magic, sizeof magic);
    if (std::memcmp(magic, kMagic, sizeof magic) != 0) r.fail("not a kdreg container");
    const auto version = r.get<std::uint32_t>();
    if (version != kContainerVersion) r.fail("unsupported container version " + std::to_string(version));

    Container c;
    c.kind = r.bytes(r.get<std::uint32_t>());
    if (c.kind != expected_kind) r.fail("expected '" + expected_kind + "' container, found '" + c.kind + "'");
    try {
        c.meta = nlohmann::json::parse(r.bytes(r.get<std::uint64_t>()));
    } catch (const nlohmann::json::parse_error& e) {
        r.fail(std::string("corrupt metadata: ") + e.what());
    }
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.bytes(r.get<std::uint32_t>());
        const auto rank = r.get<std::uint32_t>();
        if (rank > 8) r.fail("tensor '" + name + "' has implausible rank");
        ad::Shape shape(rank);
        std::uint64_t n = 1;
        for (auto& d : shape) {
            d = r.get<std::uint64_t>();
            if (d == 0) r.fail("tensor '" + name + "' has a zero extent");
            n *= d;
        }
        std::vector<double> values(n);
        r.read(reinterpret_cast<char*>(values.data()), n * sizeof(double));
        c.tensors.emplace_back(std::move(name), ad::Tensor(std::move(shape), std::move(values)));
    }
    return c;
}

}  // namespace kdreg
