#include <catch_amalgamated.hpp>

#include <thread>

#include "support.hpp"

using namespace pluto;
using testing::small_module;
using testing::TempDir;

TEST_CASE("put, list and get") {
    TempDir dir("store");
    ModuleStore store(dir.path());
    const std::vector<std::string> ids{"vpt.d", "vpt.b", "vpt.a", "vpt.c"};
    std::vector<Bytes> bytes;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const ModuleRecord r = small_module(ids[i], "blur:sev" + std::to_string(i + 1), i);
        bytes.push_back(serialize(r));
        const StoreEntry e = store.put(r);
        CHECK(e.bytes == bytes.back().size());
        CHECK(e.sha256 == to_hex(sha256(bytes.back())));
        CHECK(e.kind == "vpt");
    }
    const auto entries = store.list();
    REQUIRE(entries.size() == 4);
    CHECK(entries[0].id == "vpt.a");
    CHECK(entries[3].id == "vpt.d");
    for (std::size_t i = 0; i < ids.size(); ++i) {
        CHECK(store.get_bytes(ids[i]) == bytes[i]);
        CHECK(serialize(store.get(ids[i])) == bytes[i]);
    }
    CHECK(store.contains("vpt.a"));
    CHECK_FALSE(store.contains("vpt.z"));
    CHECK(store.audit().empty());

    // A second handle on the same directory sees the same index.
    ModuleStore again(dir.path());
    CHECK(again.list() == entries);
}

TEST_CASE("duplicate and missing ids") {
    TempDir dir("store");
    ModuleStore store(dir.path());
    store.put(small_module("m", "contrast:sev3", 1));
    try {
        store.put(small_module("m", "contrast:sev3", 2));
        FAIL("expected ConflictError");
    } catch (const ConflictError& e) {
        CHECK(std::string(e.what()) == "conflict:m");
    }
    try {
        store.get_bytes("nope");
        FAIL("expected NotFoundError");
    } catch (const NotFoundError& e) {
        CHECK(std::string(e.what()) == "not_found:nope");
    }
    CHECK(store.list().size() == 1);
}

TEST_CASE("ids and payloads are validated") {
    TempDir dir("store");
    ModuleStore store(dir.path());
    for (const std::string& bad : std::vector<std::string>{"", ".hidden", "a/b", "x y", std::string(129, 'a')})
        CHECK_THROWS_AS(store.put(small_module(bad, "blur:sev1", 1)), StoreError);
    Bytes junk = serialize(small_module("ok", "blur:sev1", 1));
    junk[junk.size() - 1] ^= 1;
    CHECK_THROWS_AS(store.put_bytes(junk), DigestMismatchError);
    CHECK(store.list().empty());
}

TEST_CASE("tampered files are detected on read") {
    TempDir dir("store");
    ModuleStore store(dir.path());
    const StoreEntry e = store.put(small_module("t", "blur:sev2", 3));
    store.put(small_module("u", "blur:sev2", 4));
    Bytes raw = read_file(dir.path() / e.file);
    raw[raw.size() / 2] ^= 0x10;
    write_file_atomic(dir.path() / e.file, raw);
    CHECK_THROWS_AS(store.get_bytes("t"), DigestMismatchError);
    CHECK(store.audit() == std::vector<std::string>{"t"});
    CHECK_NOTHROW(store.get_bytes("u"));
}

TEST_CASE("concurrent puts and lists keep the index consistent") {
    TempDir dir("store");
    ModuleStore store(dir.path());
    std::vector<Bytes> payloads;
    for (int i = 0; i < 16; ++i) payloads.push_back(serialize(small_module("c" + std::to_string(i), "blur:sev1", i)));
    std::vector<std::thread> threads;
    std::atomic<int> bad_lists{0};
    for (int t = 0; t < 4; ++t)
        threads.emplace_back([&, t] {
            for (int i = t; i < 16; i += 4) {
                store.put_bytes(payloads[i]);
                for (const auto& e : store.list())
                    if (e.sha256.size() != 64) ++bad_lists;
            }
        });
    // A second store object on the same directory exercises the file lock.
    ModuleStore other(dir.path());
    threads.emplace_back([&] {
        for (int k = 0; k < 20; ++k) (void)other.list();
    });
    for (auto& th : threads) th.join();
    CHECK(bad_lists == 0);
    const auto entries = store.list();
    REQUIRE(entries.size() == 16);
    for (int i = 0; i < 16; ++i) CHECK(store.get_bytes("c" + std::to_string(i)) == payloads[i]);
}

TEST_CASE("listing json") {
    TempDir dir("store");
    ModuleStore store(dir.path());
    store.put(small_module("b", "pixelate:sev3", 1));
    store.put(small_module("a", "blur:sev3", 2));
    const auto j = listing_json(store.list());
    REQUIRE(j.size() == 2);
    CHECK(j[0].at("id") == "a");
    CHECK(j[0].at("domain_label") == "blur:sev3");
    CHECK(j[1].at("kind") == "vpt");
    CHECK(j[1].at("sha256").get<std::string>().size() == 64);
}
