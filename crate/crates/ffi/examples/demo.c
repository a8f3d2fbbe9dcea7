/* Paillier arithmetic and encrypted inference through the C API. */
#include <stdio.h>
#include <stdlib.h>

#include "hegemony.h"

static int check(enum HgStatus s, const char *what) {
    if (s != HG_STATUS_OK) {
        fprintf(stderr, "%s failed (%d): %s\n", what, (int)s, hg_last_error());
        exit(1);
    }
    return 0;
}

int main(void) {
    HgPaillierPublicKey *pk;
    HgPaillierSecretKey *sk;
    HgPaillierCiphertext *a, *b, *sum;
    uint64_t m;
    check(hg_paillier_keygen(256, 1, true, &pk, &sk), "keygen");
    check(hg_paillier_encrypt(pk, 20, &a), "encrypt");
    check(hg_paillier_encrypt(pk, 22, &b), "encrypt");
    check(hg_paillier_add(pk, a, b, &sum), "add");
    check(hg_paillier_decrypt(pk, sk, sum, &m), "decrypt");
    printf("paillier %llu\n", (unsigned long long)m);

    HgModel *model;
    HgSession *session;
    check(hg_model_random(2, 16, 3, &model), "model");
    size_t n = hg_model_input_len(model), classes = hg_model_classes(model), written;
    double *pixels = malloc(n * sizeof(double));
    double *plain = malloc(classes * sizeof(double)), *enc = malloc(classes * sizeof(double));
    for (size_t i = 0; i < n; i++) pixels[i] = (double)(i % 7) / 7.0;
    check(hg_model_infer_plain(model, pixels, n, plain, classes, &written), "infer_plain");
    check(hg_session_new(model, HG_BACKEND_SIM, 8192, 0, false, &session), "session");
    check(hg_session_infer(session, model, pixels, n, enc, classes, &written), "infer");
    double err = 0;
    for (size_t i = 0; i < classes; i++) {
        double d = plain[i] - enc[i];
        if (d < 0) d = -d;
        if (d > err) err = d;
    }
    printf("inference %zu logits, max error %g\n", written, err);

    if (hg_session_infer(session, model, pixels, n - 1, enc, classes, &written) != HG_STATUS_INVALID_ARGUMENT) {
        fprintf(stderr, "short input accepted\n");
        return 1;
    }
    printf("error %s\n", hg_last_error());

    hg_session_free(session);
    hg_model_free(model);
    hg_paillier_ciphertext_free(a);
    hg_paillier_ciphertext_free(b);
    hg_paillier_ciphertext_free(sum);
    hg_paillier_public_key_free(pk);
    hg_paillier_secret_key_free(sk);
    free(pixels);
    free(plain);
    free(enc);
    return err < 1e-9 ? 0 : 1;
}
