#include "tomen/handshake.hpp"

#include <catch2/catch_amalgamated.hpp>
#include <set>

#include "support.hpp"

using namespace tomen;

namespace {

Error capture(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e;
  }
  FAIL("expected a tomen::Error");
  throw std::logic_error("unreachable");
}

}  // namespace

TEST_CASE("deterministic rng matches the oracle stream") {
  auto g = test::load_golden("rng_stream.golden");
  Rng rng(7);
  CHECK(hex_encode(rng.bytes(64)) == g.at("stream64"));

  std::string u64s;
  for (int i = 0; i < 4; ++i) {
    if (i) u64s += ",";
    u64s += std::to_string(rng.next_u64());
  }
  CHECK(u64s == g.at("u64s"));

  std::string uni;
  for (int i = 0; i < 8; ++i) {
    if (i) uni += ",";
    uni += std::to_string(rng.uniform(10));
  }
  CHECK(uni == g.at("uniform10"));

  Rng child = rng.fork("child");
  CHECK(hex_encode(child.bytes(16)) == g.at("fork_child_16"));
}

TEST_CASE("gen_keypair is deterministic per seed and distinct across seeds") {
  Rng a(42), b(42);
  auto kp1 = gen_keypair(a);
  auto kp2 = gen_keypair(b);
  CHECK(kp1 == kp2);

  Rng c(1), d(2);
  CHECK(gen_keypair(c).public_element != gen_keypair(d).public_element);
}

TEST_CASE("public element serialization roundtrips") {
  Rng rng(5);
  auto kp = gen_keypair(rng);
  auto hex = hex_encode(kp.public_element);
  auto back = hex_decode(hex);
  CHECK(std::equal(back.begin(), back.end(), kp.public_element.begin()));
}

TEST_CASE("honest handshake agrees field by field") {
  Rng client_rng(1001), identity_rng(2002), relay_rng(3003);
  auto client_eph = gen_keypair(client_rng);
  auto identity = gen_identity_keypair(identity_rng);

  auto create = client_create_payload(client_eph);
  auto resp = relay_respond(create, identity, relay_rng);
  auto client_keys = client_finish(client_eph, resp.created_payload, identity.public_key());

  CHECK(client_keys.forward_key == resp.hop_keys.forward_key);
  CHECK(client_keys.backward_key == resp.hop_keys.backward_key);
  CHECK(client_keys.forward_digest_seed == resp.hop_keys.forward_digest_seed);
  CHECK(client_keys.backward_digest_seed == resp.hop_keys.backward_digest_seed);
}

TEST_CASE("handshake matches the frozen oracle transcript") {
  auto g = test::load_golden("handshake_transcript.golden");
  Rng client_rng(1001), identity_rng(2002), relay_rng(3003);
  auto client_eph = gen_keypair(client_rng);
  auto identity = gen_identity_keypair(identity_rng);

  CHECK(hex_encode(client_eph.public_element) == g.at("client_public"));
  CHECK(hex_encode(identity.public_key()) == g.at("identity_public"));
  CHECK(fingerprint(identity.public_key()) == g.at("identity_fingerprint"));

  auto resp = relay_respond(client_create_payload(client_eph), identity, relay_rng);
  CHECK(hex_encode(resp.created_payload) == g.at("created_payload"));
  CHECK(hex_encode(resp.hop_keys.forward_key) == g.at("forward_key"));
  CHECK(hex_encode(resp.hop_keys.backward_key) == g.at("backward_key"));
  CHECK(hex_encode(resp.hop_keys.forward_digest_seed) == g.at("forward_digest_seed"));
  CHECK(hex_encode(resp.hop_keys.backward_digest_seed) == g.at("backward_digest_seed"));
}

TEST_CASE("tampered confirmation tag is a key mismatch") {
  Rng client_rng(1), identity_rng(2), relay_rng(3);
  auto client_eph = gen_keypair(client_rng);
  auto identity = gen_identity_keypair(identity_rng);
  auto resp = relay_respond(client_create_payload(client_eph), identity, relay_rng);

  auto tampered = resp.created_payload;
  tampered[40] ^= 0x01;  // inside the confirmation tag
  auto err = capture([&] { client_finish(client_eph, tampered, identity.public_key()); });
  CHECK(err.code() == Errc::key_mismatch);
}

TEST_CASE("signature from a different identity is an identity mismatch") {
  Rng client_rng(1), identity_rng(2), rogue_rng(9), relay_rng(3);
  auto client_eph = gen_keypair(client_rng);
  auto identity = gen_identity_keypair(identity_rng);
  auto rogue = gen_identity_keypair(rogue_rng);

  // The relay answers with the rogue key; the client expected `identity`.
  auto resp = relay_respond(client_create_payload(client_eph), rogue, relay_rng);
  auto err = capture([&] { client_finish(client_eph, resp.created_payload, identity.public_key()); });
  CHECK(err.code() == Errc::identity_mismatch);
}

TEST_CASE("malformed group element is rejected") {
  Rng identity_rng(2), relay_rng(3);
  auto identity = gen_identity_keypair(identity_rng);
  auto err = capture([&] { relay_respond(Bytes(31, 1), identity, relay_rng); });
  CHECK(err.code() == Errc::handshake_malformed);

  auto low_order = capture([&] { relay_respond(Bytes(32, 0), identity, relay_rng); });
  CHECK(low_order.code() == Errc::handshake_malformed);
}

TEST_CASE("handshake agreement holds across 100 seeds") {
  for (uint64_t seed = 0; seed < 100; ++seed) {
    Rng root(seed);
    Rng client_rng = root.fork("client");
    Rng identity_rng = root.fork("identity");
    Rng relay_rng = root.fork("relay");
    auto client_eph = gen_keypair(client_rng);
    auto identity = gen_identity_keypair(identity_rng);
    auto resp = relay_respond(client_create_payload(client_eph), identity, relay_rng);
    auto keys = client_finish(client_eph, resp.created_payload, identity.public_key());
    REQUIRE(keys == resp.hop_keys);
  }
}

TEST_CASE("derive_hop_keys is deterministic and avalanches") {
  Bytes secret(32, 0x5c);
  CHECK(derive_hop_keys(secret) == derive_hop_keys(secret));

  Bytes flipped = secret;
  flipped[17] ^= 0x04;
  auto a = derive_hop_keys(secret);
  auto b = derive_hop_keys(flipped);
  CHECK(a.forward_key != b.forward_key);
  CHECK(a.backward_key != b.backward_key);
  CHECK(a.forward_digest_seed != b.forward_digest_seed);
  CHECK(a.backward_digest_seed != b.backward_digest_seed);
}

TEST_CASE("derive_hop_keys zero-secret known answer") {
  auto g = test::load_golden("hop_keys_zero_secret.golden");
  auto keys = derive_hop_keys(Bytes(32, 0));
  CHECK(hex_encode(keys.forward_key) == g.at("forward_key"));
  CHECK(hex_encode(keys.backward_key) == g.at("backward_key"));
  CHECK(hex_encode(keys.forward_digest_seed) == g.at("forward_digest_seed"));
  CHECK(hex_encode(keys.backward_digest_seed) == g.at("backward_digest_seed"));
}

TEST_CASE("apply_layer is an involution at a fixed counter") {
  Rng rng(77);
  crypto::Key key;
  rng.fill(key.data(), key.size());
  PayloadBuf payload;
  rng.fill(payload.data(), payload.size());

  LayerCipherState s1(key, 9), s2(key, 9);
  auto once = s1.apply(payload);
  CHECK(once != payload);
  CHECK(s2.apply(once) == payload);
  CHECK(s1.counter() == 10);
}

TEST_CASE("apply_layer matches the oracle keystream") {
  auto g = test::load_golden("layer_cipher.golden");
  crypto::Key key;
  auto key_bytes = test::golden_bytes(g, "key");
  std::copy(key_bytes.begin(), key_bytes.end(), key.begin());
  auto payload_bytes = test::golden_bytes(g, "payload");
  PayloadBuf payload;
  std::copy(payload_bytes.begin(), payload_bytes.end(), payload.begin());

  LayerCipherState state(key, std::stoull(g.at("counter")));
  CHECK(hex_encode(state.apply(payload)) == g.at("ciphertext"));
}

TEST_CASE("triple layering peels back to the original in order") {
  Rng rng(31337);
  for (int trial = 0; trial < 1000; ++trial) {
    crypto::Key k_exit, k_mid, k_guard;
    rng.fill(k_exit.data(), 32);
    rng.fill(k_mid.data(), 32);
    rng.fill(k_guard.data(), 32);
    PayloadBuf payload;
    rng.fill(payload.data(), payload.size());

    LayerCipherState exit_add(k_exit), mid_add(k_mid), guard_add(k_guard);
    auto wire = guard_add.apply(mid_add.apply(exit_add.apply(payload)));

    LayerCipherState guard_peel(k_guard), mid_peel(k_mid), exit_peel(k_exit);
    auto back = exit_peel.apply(mid_peel.apply(guard_peel.apply(wire)));
    REQUIRE(back == payload);
  }
}

TEST_CASE("peeling with one wrong key breaks recognition") {
  Rng rng(404);
  crypto::Key k_exit, k_mid, k_guard, k_wrong;
  rng.fill(k_exit.data(), 32);
  rng.fill(k_mid.data(), 32);
  rng.fill(k_guard.data(), 32);
  rng.fill(k_wrong.data(), 32);

  RelayPayload rp;
  rp.relay_command = RelayCommand::kData;
  rp.stream_id = 1;
  rp.data = to_bytes("payload");
  crypto::Key seed{};
  RunningDigest sealer(seed);
  rp = update_and_seal_digest(sealer, rp);
  auto plain = encode_relay_payload(rp);

  LayerCipherState exit_add(k_exit), mid_add(k_mid), guard_add(k_guard);
  auto wire = guard_add.apply(mid_add.apply(exit_add.apply(plain)));

  // Middle key replaced by a wrong one: the fully peeled result must not
  // look recognized (or must fail the digest check).
  LayerCipherState guard_peel(k_guard), wrong_peel(k_wrong), exit_peel(k_exit);
  auto garbled = exit_peel.apply(wrong_peel.apply(guard_peel.apply(wire)));
  bool recognized = looks_recognized(garbled);
  if (recognized) {
    auto decoded = decode_relay_payload(garbled);
    RunningDigest checker(seed);
    CHECK_FALSE(verify_digest(checker, decoded));
  } else {
    CHECK_FALSE(recognized);
  }
}

TEST_CASE("counter exhaustion destroys the state") {
  crypto::Key key{};
  LayerCipherState state(key, UINT64_MAX);
  PayloadBuf payload{};
  auto err = capture([&] { state.apply(payload); });
  CHECK(err.code() == Errc::counter_exhausted);
}

TEST_CASE("same key and counter are never reused across a scripted run") {
  // Instrumented cipher states: collect every (key, counter) pair consumed
  // while layering a batch of outbound cells; all must be distinct.
  Rng rng(2024);
  crypto::Key k0, k1, k2;
  rng.fill(k0.data(), 32);
  rng.fill(k1.data(), 32);
  rng.fill(k2.data(), 32);
  LayerCipherState s0(k0), s1(k1), s2(k2);

  std::set<std::pair<std::string, uint64_t>> used;
  for (int cell = 0; cell < 50; ++cell) {
    PayloadBuf payload;
    rng.fill(payload.data(), payload.size());
    for (auto* s : {&s2, &s1, &s0}) {
      auto pair = std::make_pair(hex_encode(s->key()), s->counter());
      REQUIRE(used.insert(pair).second);
      payload = s->apply(payload);
    }
  }
}

TEST_CASE("seal then verify with a synchronized state") {
  crypto::Key seed;
  Rng rng(8);
  rng.fill(seed.data(), 32);
  RunningDigest sender(seed), receiver(seed);

  RelayPayload rp;
  rp.relay_command = RelayCommand::kData;
  rp.stream_id = 3;
  rp.data = to_bytes("hello");
  auto sealed = update_and_seal_digest(sender, rp);
  CHECK(sealed.digest != std::array<uint8_t, 4>{});
  CHECK(verify_digest(receiver, sealed));
}

TEST_CASE("one flipped byte fails verification") {
  crypto::Key seed{};
  RunningDigest sender(seed), receiver(seed);
  RelayPayload rp;
  rp.relay_command = RelayCommand::kData;
  rp.data = to_bytes("abcdef");
  auto sealed = update_and_seal_digest(sender, rp);
  sealed.data[2] ^= 0x20;
  CHECK_FALSE(verify_digest(receiver, sealed));
}

TEST_CASE("tampering detection over 1000 randomized flips") {
  Rng rng(99);
  crypto::Key seed;
  rng.fill(seed.data(), 32);
  for (int i = 0; i < 1000; ++i) {
    RunningDigest sender(seed), receiver(seed);
    RelayPayload rp;
    rp.relay_command = RelayCommand::kData;
    rp.stream_id = static_cast<uint16_t>(1 + rng.uniform(100));
    rp.data = rng.bytes(1 + rng.uniform(kRelayDataMax));
    auto sealed = update_and_seal_digest(sender, rp);

    // Verification covers the wire bytes, so a flip anywhere in the 505
    // bytes (header, data, digest field or padding) must be detected.
    auto buf = encode_relay_payload(sealed);
    buf[rng.uniform(buf.size())] ^= static_cast<uint8_t>(1 + rng.uniform(255));
    REQUIRE_FALSE(verify_digest(receiver, buf));
  }
}

TEST_CASE("digest verification is order sensitive") {
  auto g = test::load_golden("running_digest.golden");
  crypto::Key seed;
  auto seed_bytes = test::golden_bytes(g, "seed");
  std::copy(seed_bytes.begin(), seed_bytes.end(), seed.begin());

  auto make = [](std::string_view word) {
    RelayPayload rp;
    rp.relay_command = RelayCommand::kData;
    rp.stream_id = 1;
    rp.data = to_bytes(word);
    return rp;
  };

  RunningDigest sender(seed);
  auto first = update_and_seal_digest(sender, make("hello"));
  auto second = update_and_seal_digest(sender, make("world"));
  CHECK(hex_encode(first.digest) == g.at("digest_hello"));
  CHECK(hex_encode(second.digest) == g.at("digest_world"));

  RunningDigest in_order(seed);
  CHECK(verify_digest(in_order, first));
  CHECK(verify_digest(in_order, second));

  RunningDigest out_of_order(seed);
  CHECK_FALSE(verify_digest(out_of_order, second));
}
