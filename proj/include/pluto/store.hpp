// Filesystem-backed module store.
//
// Layout: <root>/store.json plus one container file per entry. The index maps
// id -> {file, bytes, sha256, domain_label, kind}. Reads verify the digest of
// the file they return. Writes hold an exclusive flock on <root>/.lock (for
// other processes) and a unique lock on an in-process shared_mutex.
#pragma once

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "pluto/pet.hpp"

namespace pluto {

struct StoreError : Error {
    using Error::Error;
};
struct NotFoundError : StoreError {
    explicit NotFoundError(const std::string& id) : StoreError("not_found:" + id), id(id) {}
    std::string id;
};
struct ConflictError : StoreError {
    explicit ConflictError(const std::string& id) : StoreError("conflict:" + id), id(id) {}
    std::string id;
};

struct StoreEntry {
    std::string id;
    std::string file; // relative to the store root
    std::size_t bytes = 0;
    std::string sha256;
    std::string domain_label;
    std::string kind;

    bool operator==(const StoreEntry&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(StoreEntry, id, file, bytes, sha256, domain_label, kind)

inline Bytes read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw StoreError("cannot open " + p.string());
    return Bytes(std::istreambuf_iterator<char>(in), {});
}

/// Writes via a temporary file and rename so readers never see partial files.
inline void write_file_atomic(const std::filesystem::path& p, std::span<const std::uint8_t> bytes) {
    auto tmp = p;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw StoreError("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw StoreError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, p);
}

/// Ids become file names, so they are restricted to [A-Za-z0-9._:-], 1..128 chars, not starting with '.'.
inline void validate_id(const std::string& id) {
    if (id.empty() || id.size() > 128 || id.front() == '.') throw StoreError("invalid id: '" + id + "'");
    for (char c : id)
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_' || c == '-' || c == ':'))
            throw StoreError("invalid id: '" + id + "'");
}

class FileLock {
public:
    explicit FileLock(const std::filesystem::path& p) : fd_(::open(p.c_str(), O_RDWR | O_CREAT, 0644)) {
        if (fd_ < 0) throw StoreError("cannot open lock file " + p.string());
        if (::flock(fd_, LOCK_EX) != 0) {
            ::close(fd_);
            throw StoreError("cannot lock " + p.string());
        }
    }
    ~FileLock() {
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
    }
    FileLock(const FileLock&) = delete;
    FileLock& operator=(const FileLock&) = delete;

private:
    int fd_;
};

class ModuleStore {
public:
    /// Opens (creating if needed) the store at `root`.
    explicit ModuleStore(std::filesystem::path root) : root_(std::move(root)) {
        std::filesystem::create_directories(root_);
        if (!std::filesystem::exists(index_path())) {
            FileLock lock(root_ / ".lock");
            if (!std::filesystem::exists(index_path())) save_index({});
        }
    }

    const std::filesystem::path& root() const noexcept { return root_; }

    /// Adds a container. Rejects duplicates and undecodable bytes.
    StoreEntry put_bytes(std::span<const std::uint8_t> bytes) {
        const Container c = decode_container(bytes);
        validate_id(c.id);
        std::unique_lock guard(mu_);
        FileLock lock(root_ / ".lock");
        auto index = load_index();
        if (index.count(c.id)) throw ConflictError(c.id);
        StoreEntry e{c.id, c.id + ".plut", bytes.size(), file_digest_hex(bytes), c.domain_label, c.kind};
        write_file_atomic(root_ / e.file, bytes);
        index[e.id] = e;
        save_index(index);
        return e;
    }

    StoreEntry put(const ModuleRecord& r) { return put_bytes(serialize(r)); }

    /// Stored bytes of `id`, digest-verified against the index.
    Bytes get_bytes(const std::string& id) const {
        StoreEntry e;
        {
            std::shared_lock guard(mu_);
            auto index = load_index();
            auto it = index.find(id);
            if (it == index.end()) throw NotFoundError(id);
            e = it->second;
        }
        Bytes b = read_file(root_ / e.file);
        if (b.size() != e.bytes || file_digest_hex(b) != e.sha256)
            throw DigestMismatchError("store entry " + id + " does not match its recorded digest");
        return b;
    }

    ModuleRecord get(const std::string& id, const VitConfig* cfg = nullptr) const {
        return deserialize(get_bytes(id), cfg);
    }

    bool contains(const std::string& id) const {
        std::shared_lock guard(mu_);
        return load_index().count(id) > 0;
    }

    /// Entries sorted by id.
    std::vector<StoreEntry> list() const {
        std::shared_lock guard(mu_);
        std::vector<StoreEntry> out;
        for (auto& [id, e] : load_index()) out.push_back(e);
        return out;
    }

    /// Verifies every entry's digest; returns the ids that fail.
    std::vector<std::string> audit() const {
        std::vector<std::string> bad;
        for (const auto& e : list()) {
            try {
                (void)get_bytes(e.id);
            } catch (const Error&) {
                bad.push_back(e.id);
            }
        }
        return bad;
    }

private:
    std::filesystem::path index_path() const { return root_ / "store.json"; }

    std::map<std::string, StoreEntry> load_index() const {
        const Bytes raw = read_file(index_path());
        std::map<std::string, StoreEntry> index;
        try {
            const auto j = nlohmann::json::parse(raw.begin(), raw.end());
            for (const auto& e : j.at("entries")) {
                auto se = e.get<StoreEntry>();
                index[se.id] = se;
            }
        } catch (const nlohmann::json::exception& ex) {
            throw StoreError(std::string("corrupt store index: ") + ex.what());
        }
        return index;
    }

    void save_index(const std::map<std::string, StoreEntry>& index) const {
        nlohmann::json j;
        j["entries"] = nlohmann::json::array();
        for (const auto& [id, e] : index) j["entries"].push_back(e);
        const std::string s = j.dump(2) + "\n";
        write_file_atomic(index_path(), std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
    }

    std::filesystem::path root_;
    mutable std::shared_mutex mu_;
};

/// Listing as sent over the wire: [{id, domain_label, kind, sha256, bytes}] sorted by id.
inline nlohmann::json listing_json(const std::vector<StoreEntry>& entries) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& e : entries)
        j.push_back({{"id", e.id}, {"domain_label", e.domain_label}, {"kind", e.kind}, {"sha256", e.sha256},
                     {"bytes", e.bytes}});
    return j;
}

} // namespace pluto
